"""Bi-criteria subset selection: maximize alpha * quality + beta * pairwise diversity."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from vptlab.decode import Candidate
from vptlab.errors import UsageError
from vptlab.metrics import bleu4

log = logging.getLogger(__name__)

BRUTE_FORCE_LIMIT = 1_000_000


@dataclass
class SelectionConfig:
    u: int = 10
    alpha: float = 1.0
    beta: float = 1.0
    score_mode: str = "prefix_free"  # or "prefix_conditioned"

    def __post_init__(self):
        if self.u < 1:
            raise ValueError("U must be at least 1")
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("alpha and beta must be non-negative and not both zero")
        if self.score_mode not in ("prefix_free", "prefix_conditioned"):
            raise ValueError(f"unknown score mode {self.score_mode!r}")


@dataclass
class SelectionResult:
    chosen: list[int]
    g_value: float
    h_value: float
    objective_value: float


def candidate_quality(c: Candidate, score_mode: str = "prefix_free") -> float:
    if c.length < 1:
        raise ValueError("zero-length candidate has no normalized score")
    if score_mode == "prefix_free":
        if c.quality is None:
            raise UsageError("candidate has not been rescored by the backbone")
        return c.quality
    return c.normalized_score


def quality_g(subset: Sequence[Candidate], score_mode: str = "prefix_free") -> float:
    """Sum of length-normalized log-probabilities."""
    return float(sum(candidate_quality(c, score_mode) for c in subset))


def diversity_h(subset: Sequence[Sequence]) -> float:
    """Sum over ordered pairs of (1 - BLEU-4(y_i, {y_j})). Accepts candidates or token lists."""
    seqs = [_tokens(s) for s in subset]
    return float(sum(1.0 - bleu4(a, [b]) for i, a in enumerate(seqs) for j, b in enumerate(seqs) if i != j))


def _tokens(s) -> list:
    return list(s.content) if isinstance(s, Candidate) else list(s)


class PairCache:
    """Pairwise (1 - BLEU) for both orders of every pair, computed lazily."""

    def __init__(self, pool: Sequence[Candidate]):
        self.seqs = [_tokens(c) for c in pool]
        self.cache: dict[tuple[int, int], float] = {}

    def both(self, i: int, j: int) -> float:
        key = (i, j) if i < j else (j, i)
        if key not in self.cache:
            a, b = self.seqs[key[0]], self.seqs[key[1]]
            self.cache[key] = (1.0 - bleu4(a, [b])) + (1.0 - bleu4(b, [a]))
        return self.cache[key]


def _result(pool, chosen, cfg: SelectionConfig, pairs: PairCache) -> SelectionResult:
    g = quality_g([pool[i] for i in chosen], cfg.score_mode)
    h = float(sum(pairs.both(a, b) for a, b in itertools.combinations(chosen, 2)))
    return SelectionResult(list(chosen), g, h, cfg.alpha * g + cfg.beta * h)


def greedy_select(pool: Sequence[Candidate], cfg: SelectionConfig, cache: PairCache | None = None) -> SelectionResult:
    """Add, U times, the candidate with the largest marginal gain; ties go to the lowest index.

    Pass a ``PairCache`` built on the same pool to reuse pairwise BLEU across
    several (alpha, beta) settings.
    """
    u = cfg.u
    if u > len(pool):
        log.warning("U=%d exceeds the pool of %d; selecting the whole pool", u, len(pool))
        u = len(pool)
    quality = [candidate_quality(c, cfg.score_mode) for c in pool]
    pairs = cache if cache is not None else PairCache(pool)
    chosen: list[int] = []
    gain_div = np.zeros(len(pool))  # diversity added by each candidate against the chosen set
    remaining = set(range(len(pool)))
    for _ in range(u):
        best, best_gain = -1, -math.inf
        for i in sorted(remaining):
            gain = cfg.alpha * quality[i] + cfg.beta * gain_div[i]
            if gain > best_gain:
                best, best_gain = i, gain
        chosen.append(best)
        remaining.discard(best)
        if cfg.beta:
            for i in remaining:
                gain_div[i] += pairs.both(i, best)
    return _result(pool, chosen, cfg, pairs)


def brute_force_select(pool: Sequence[Candidate], cfg: SelectionConfig) -> SelectionResult:
    """Exact maximizer over all U-subsets; ties go to the lexicographically first index tuple."""
    u = min(cfg.u, len(pool))
    n_subsets = math.comb(len(pool), u)
    if n_subsets > BRUTE_FORCE_LIMIT:
        raise UsageError(f"C({len(pool)}, {u}) = {n_subsets} subsets exceeds the brute-force limit")
    pairs = PairCache(pool)
    best = None
    for subset in itertools.combinations(range(len(pool)), u):
        res = _result(pool, subset, cfg, pairs)
        if best is None or res.objective_value > best.objective_value:
            best = res
    return best


def first_unique(pool: Sequence[Candidate], u: int) -> SelectionResult:
    """Ablation baseline: the first U distinct candidates in generation order."""
    seen, chosen = set(), []
    for i, c in enumerate(pool):
        if c.tokens not in seen:
            seen.add(c.tokens)
            chosen.append(i)
        if len(chosen) == u:
            break
    return SelectionResult(chosen, math.nan, math.nan, math.nan)
