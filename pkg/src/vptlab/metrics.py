"""Sentence-level accuracy metrics, set-level diversity metrics, oracle aggregation and the Wilcoxon test."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from nltk.stem.porter import PorterStemmer

from vptlab.errors import MetricError

log = logging.getLogger(__name__)

Tokens = Sequence[str]


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _as_refs(refs) -> list[Tokens]:
    if not refs:
        raise MetricError("need at least one reference")
    if isinstance(refs[0], str):
        return [refs]
    return list(refs)


def bleu4(hyp: Tokens, refs) -> float:
    """Sentence BLEU-4 with multi-reference clipping and closest-length brevity penalty.

    A zero match count at orders 2-4 becomes (0+1)/(total+1); a zero unigram
    match count gives 0.
    """
    refs = _as_refs(refs)
    if len(hyp) == 0:
        log.debug("empty hypothesis scored as 0 BLEU")
        return 0.0
    log_p = 0.0
    for n in range(1, 5):
        counts = _ngrams(hyp, n)
        total = sum(counts.values())
        max_ref: Counter = Counter()
        for r in refs:
            for g, c in _ngrams(r, n).items():
                if c > max_ref[g]:
                    max_ref[g] = c
        matches = sum(min(c, max_ref[g]) for g, c in counts.items())
        if n == 1 and matches == 0:
            return 0.0
        if matches == 0:
            matches, total = 1, total + 1
        log_p += math.log(matches / total) / 4
    c = len(hyp)
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1]
    bp = 1.0 if c >= r else math.exp(1 - r / c)
    return min(1.0, bp * math.exp(log_p))


def _lcs(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp: Tokens, refs) -> float:
    """LCS F1 (beta = 1), maximized over references."""
    best = 0.0
    for ref in _as_refs(refs):
        if not hyp or not ref:
            continue
        lcs = _lcs(hyp, ref)
        if lcs:
            p, r = lcs / len(hyp), lcs / len(ref)
            best = max(best, 2 * p * r / (p + r))
    return best


_stemmer = PorterStemmer()


@lru_cache(maxsize=65536)
def _stem(token: str) -> str:
    return _stemmer.stem(token)


def _align(hyp: Tokens, ref: Tokens) -> list[tuple[int, int]]:
    """Exact matches first, then Porter-stem matches among the leftovers.

    Within a stage each hypothesis token takes the reference position that
    extends the previous match when possible, else the earliest free one.
    """
    used_h: set[int] = set()
    used_r: set[int] = set()
    pairs: dict[int, int] = {}
    for key in (lambda t: t, _stem):
        ref_keys = [key(t) for t in ref]
        for i, tok in enumerate(hyp):
            if i in used_h:
                continue
            k = key(tok)
            free = [j for j, rk in enumerate(ref_keys) if rk == k and j not in used_r]
            if not free:
                continue
            prev = pairs.get(i - 1)
            j = prev + 1 if prev is not None and prev + 1 in free else free[0]
            pairs[i] = j
            used_h.add(i)
            used_r.add(j)
    return sorted(pairs.items())


def _meteor_single(hyp: Tokens, ref: Tokens) -> float:
    pairs = _align(hyp, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(hyp), m / len(ref)
    f_mean = 10 * p * r / (r + 9 * p)
    chunks = 1
    for (h0, r0), (h1, r1) in zip(pairs, pairs[1:]):
        if not (h1 == h0 + 1 and r1 == r0 + 1):
            chunks += 1
    return f_mean * (1 - 0.5 * (chunks / m) ** 3)


def meteor_lite(hyp: Tokens, refs) -> float:
    """METEOR with exact and stem matching only, maximized over references."""
    if not hyp:
        return 0.0
    return max((_meteor_single(hyp, ref) for ref in _as_refs(refs) if ref), default=0.0)


def distinct_n(summaries: Sequence[Tokens], n: int, mode: str = "set") -> float:
    """Distinct-n. ``mode="set"``: unique n-grams over the whole set / total n-grams.

    ``mode="average"``: the same ratio computed per summary, then averaged
    over summaries that have at least ``n`` tokens.
    """
    if not summaries:
        raise MetricError("distinct-n of an empty set")
    if mode == "set":
        grams: Counter = Counter()
        for s in summaries:
            grams.update(_ngrams(s, n))
        total = sum(grams.values())
        if total == 0:
            raise MetricError(f"no summary has {n} tokens")
        return len(grams) / total
    if mode == "average":
        ratios = []
        for s in summaries:
            g = _ngrams(s, n)
            if g:
                ratios.append(len(g) / sum(g.values()))
        if not ratios:
            raise MetricError(f"no summary has {n} tokens")
        return float(np.mean(ratios))
    raise ValueError(f"unknown distinct-n mode {mode!r}")


def self_bleu(summaries: Sequence[Tokens]) -> float:
    """Mean BLEU-4 of each summary against each other one, over ordered pairs."""
    if len(summaries) < 2:
        raise MetricError("self-BLEU needs at least two summaries")
    scores = [bleu4(a, [b]) for i, a in enumerate(summaries) for j, b in enumerate(summaries) if i != j]
    return float(np.mean(scores))


METRICS: dict[str, Callable[[Tokens, list[Tokens]], float]] = {
    "bleu": bleu4,
    "rouge_l": rouge_l,
    "meteor": meteor_lite,
}


def oracle_score(candidates: Sequence[Tokens], refs, metric: str | Callable = "bleu") -> float:
    """Best score any single candidate achieves against the references."""
    if not candidates:
        raise MetricError("oracle score of an empty candidate set")
    fn = METRICS[metric] if isinstance(metric, str) else metric
    return max(fn(c, refs) for c in candidates)


# reports -------------------------------------------------------------------------------


@dataclass
class MetricReport:
    name: str
    distinct_mode: str
    per_example: list[dict] = field(default_factory=list)
    means: dict = field(default_factory=dict)

    COLUMNS = (("B", "bleu"), ("R", "rouge_l"), ("M", "meteor"), ("D-1", "distinct1"), ("D-2", "distinct2"), ("S-B", "self_bleu"))

    def to_json(self) -> dict:
        return {"name": self.name, "distinct_mode": self.distinct_mode, "means": self.means, "per_example": self.per_example}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)

    def values(self, key: str) -> list[float]:
        return [row[key] for row in self.per_example]


def evaluate_sets(
    name: str,
    ids: Sequence[str],
    candidate_sets: Sequence[Sequence[Tokens]],
    references: Sequence[Sequence[Tokens]],
    distinct_mode: str = "set",
) -> MetricReport:
    """Oracle accuracy and diversity per example, with arithmetic corpus means (scores scaled to [0, 1])."""
    if not (len(ids) == len(candidate_sets) == len(references)):
        raise MetricError("ids, candidate sets and references must align")
    rows = []
    for ex_id, cands, refs in zip(ids, candidate_sets, references):
        cands = [c for c in cands if c] or [[]]
        row = {"id": ex_id, "size": len(cands)}
        for key, fn in METRICS.items():
            row[key] = oracle_score(cands, refs, fn)
        row["distinct1"] = _safe(lambda: distinct_n(cands, 1, distinct_mode))
        row["distinct2"] = _safe(lambda: distinct_n(cands, 2, distinct_mode))
        row["self_bleu"] = _safe(lambda: self_bleu(cands))
        rows.append(row)
    means = {}
    for _, key in MetricReport.COLUMNS:
        vals = [r[key] for r in rows if r[key] is not None]
        means[key] = float(np.mean(vals)) if vals else None
    means["size"] = float(np.mean([r["size"] for r in rows])) if rows else 0.0
    return MetricReport(name, distinct_mode, rows, means)


def _safe(fn: Callable[[], float]) -> float | None:
    try:
        return fn()
    except MetricError:
        return None


def render_table(reports: Sequence[MetricReport]) -> str:
    """Plain-text table, scores as percentages."""
    head = f"{'method':<28}" + "".join(f"{c:>8}" for c, _ in MetricReport.COLUMNS)
    lines = [head, "-" * len(head)]
    for rep in reports:
        cells = []
        for _, key in MetricReport.COLUMNS:
            v = rep.means.get(key)
            cells.append(f"{'n/a':>8}" if v is None else f"{100 * v:>8.2f}")
        lines.append(f"{rep.name:<28}" + "".join(cells))
    modes = sorted({r.distinct_mode for r in reports})
    lines.append(f"(distinct-n mode: {', '.join(modes)})")
    return "\n".join(lines)


# Wilcoxon signed-rank --------------------------------------------------------------------


@dataclass
class WilcoxonResult:
    statistic: float  # W+: sum of ranks of positive differences
    n_effective: int
    p_value: float
    significant_at: bool  # p < 0.05
    method: str  # "exact" or "normal"

    def to_json(self) -> dict:
        return asdict(self)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def wilcoxon_signed_rank(deltas: Sequence[float], alternative: str = "greater", alpha: float = 0.05, zero_tol: float = 1e-12) -> WilcoxonResult:
    """One-sided signed-rank test of H1: the median difference is greater than zero.

    Zero differences are dropped and tied magnitudes get averaged ranks. The
    null distribution is exact (enumerated via a subset-sum recursion over
    doubled ranks) for up to 12 effective pairs, and a tie-corrected normal
    approximation with continuity correction above that.
    """
    if alternative != "greater":
        raise ValueError("only the one-sided 'greater' alternative is supported")
    d = np.asarray(deltas, dtype=np.float64)
    d = d[np.abs(d) > zero_tol]
    n = len(d)
    if n == 0:
        raise MetricError("all differences are zero; the test is undefined")
    if n < 5:
        raise MetricError(f"need at least 5 non-zero differences, got {n}")
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= 12:
        doubled = np.rint(2 * ranks).astype(int)
        dist = np.zeros(int(doubled.sum()) + 1)
        dist[0] = 1.0
        for r in doubled:
            dist[r:] = dist[r:] + dist[: len(dist) - r].copy()
        dist /= dist.sum()
        p = float(dist[int(round(2 * w_plus)) :].sum())
        method = "exact"
    else:
        mean = n * (n + 1) / 4
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24 - float(((tie_counts**3) - tie_counts).sum()) / 48
        z = (w_plus - mean - 0.5) / math.sqrt(var) if var > 0 else 0.0
        p = 0.5 * math.erfc(z / math.sqrt(2))
        method = "normal"
    p = min(1.0, max(0.0, p))
    return WilcoxonResult(w_plus, n, p, p < alpha, method)
