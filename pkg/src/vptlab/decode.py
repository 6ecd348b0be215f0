"""Decoding strategies over a step-wise session interface.

A decoding model exposes ``start(x, rows, prefix)`` returning a session with
``logits()`` (``[rows, vocab]`` float64, disallowed tokens at ``-inf``) and
``advance(parents, tokens)`` which reorders rows by ``parents`` and appends
one token to each. Strategies only touch that interface, so the same code
drives the transformer backbone and small lookup-table models used in tests.

Tie-breaking is by lowest token id, then by shorter sequence.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from vptlab.backbone.model import AttentionPrefix, Backbone, ContextualEmbeddings, pad_batch
from vptlab.corpus import BOS, EOS, PAD, SEP, Vocabulary
from vptlab.errors import DataError, ShapeError
from vptlab.numerics.tensor import Tensor, no_grad

log = logging.getLogger(__name__)

NEG_INF = -np.inf


@dataclass
class DecodeConfig:
    max_steps: int = 24
    beam_width: int = 4
    temperature: float = 1.0
    dbs_groups: int = 1
    dbs_lambda: float = 0.0
    sbs_temperature: float = 1.0
    min_length: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam width must be at least 1")
        if self.dbs_groups < 1 or self.beam_width % self.dbs_groups:
            raise ValueError("dbs_groups must divide beam_width")
        if not self.temperature > 0 or not self.sbs_temperature > 0:
            raise ValueError("temperatures must be positive")
        if self.dbs_lambda < 0:
            raise ValueError("dbs_lambda must be non-negative")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")


@dataclass(frozen=True)
class Candidate:
    """A decoded sequence ``BOS ... [EOS]`` with one log-probability per generated token."""

    tokens: tuple[int, ...]
    logprobs: tuple[float, ...]
    quality: float | None = None  # length-normalized log-prob under prefix-free rescoring
    eos: int = EOS

    def __post_init__(self):
        if len(self.logprobs) != len(self.tokens) - 1:
            raise ShapeError("need one log-probability per generated token")

    @property
    def content(self) -> tuple[int, ...]:
        body = self.tokens[1:]
        return body[:-1] if body and body[-1] == self.eos else body

    @property
    def finished(self) -> bool:
        return len(self.tokens) > 1 and self.tokens[-1] == self.eos

    @property
    def total_logprob(self) -> float:
        return float(sum(self.logprobs))

    @property
    def length(self) -> int:
        """T: generated tokens excluding EOS."""
        return len(self.content)

    @property
    def normalized_score(self) -> float:
        return self.total_logprob / max(self.length, 1)

    def with_quality(self, quality: float) -> "Candidate":
        return Candidate(self.tokens, self.logprobs, quality, self.eos)


# models -----------------------------------------------------------------------


class DecodeSession(Protocol):
    def logits(self) -> np.ndarray: ...

    def advance(self, parents: np.ndarray, tokens: np.ndarray) -> None: ...


class DecodingModel(Protocol):
    bos: int
    eos: int
    vocab_size: int
    max_steps_limit: int

    def start(self, x: Sequence[int], rows: int, prefix: AttentionPrefix | None = None) -> DecodeSession: ...


class TableModel:
    """Toy model whose next-token logits are a function of the generated prefix.

    ``table`` maps a tuple of generated tokens (BOS excluded) to a logit
    vector. ``TableModel.random`` builds a reproducible table for any prefix.
    """

    bos = 0

    def __init__(self, vocab_size: int, table: Callable[[tuple[int, ...]], np.ndarray], eos: int, max_steps_limit: int = 64):
        self.vocab_size = vocab_size
        self.table = table
        self.eos = eos
        self.max_steps_limit = max_steps_limit

    @classmethod
    def random(cls, vocab_size: int, eos: int, seed: int = 0, scale: float = 2.0) -> "TableModel":
        cache: dict[tuple[int, ...], np.ndarray] = {}

        def table(prefix: tuple[int, ...]) -> np.ndarray:
            if prefix not in cache:
                rng = np.random.default_rng([seed, len(prefix), *prefix])
                cache[prefix] = rng.normal(0.0, scale, size=vocab_size)
            return cache[prefix]

        return cls(vocab_size, table, eos)

    def start(self, x: Sequence[int], rows: int, prefix=None) -> "_TableSession":
        return _TableSession(self, [()] * rows)


class _TableSession:
    def __init__(self, model: TableModel, prefixes: list[tuple[int, ...]]):
        self.model = model
        self.prefixes = prefixes

    def logits(self) -> np.ndarray:
        return np.stack([np.asarray(self.model.table(p), dtype=np.float64) for p in self.prefixes])

    def advance(self, parents: np.ndarray, tokens: np.ndarray) -> None:
        self.prefixes = [self.prefixes[int(r)] + (int(t),) for r, t in zip(parents, tokens)]


class BackboneDecoder:
    """Adapter running incremental decoding on a :class:`Backbone`."""

    bos = BOS
    eos = EOS
    banned = (PAD, BOS, SEP)

    def __init__(self, backbone: Backbone):
        self.backbone = backbone
        self.vocab_size = backbone.cfg.vocab_size
        self.max_steps_limit = backbone.cfg.max_len
        self._memo: tuple[tuple[int, ...], ContextualEmbeddings] | None = None

    def memory(self, x: Sequence[int]) -> ContextualEmbeddings:
        key = tuple(int(t) for t in x)
        if self._memo is None or self._memo[0] != key:
            self.backbone.eval()
            with no_grad():
                enc = self.backbone.encode(np.asarray([key]))
            self._memo = (key, enc)
        return self._memo[1]

    def start(self, x: Sequence[int], rows: int, prefix: AttentionPrefix | None = None) -> "_BackboneSession":
        enc = self.memory(x)
        tiled = ContextualEmbeddings(Tensor.wrap(np.repeat(enc.values.data, rows, axis=0)), np.repeat(enc.mask, rows, axis=0))
        if prefix is not None and prefix.prefix_len and prefix.batch != rows:
            if prefix.batch != 1:
                raise ShapeError(f"prefix batch {prefix.batch} does not match {rows} rows")
            prefix = prefix.select(np.zeros(rows, dtype=np.int64))
        return _BackboneSession(self, tiled, prefix)


class _BackboneSession:
    def __init__(self, owner: BackboneDecoder, memory: ContextualEmbeddings, prefix: AttentionPrefix | None):
        self.owner = owner
        bb = owner.backbone
        self.cache = bb.start_cache(memory, prefix)
        self._logits = self._mask(bb.step(np.full(memory.values.shape[0], BOS), self.cache))

    def _mask(self, logits: np.ndarray) -> np.ndarray:
        out = logits.astype(np.float64)
        out[:, list(self.owner.banned)] = NEG_INF
        return out

    def logits(self) -> np.ndarray:
        return self._logits

    def advance(self, parents: np.ndarray, tokens: np.ndarray) -> None:
        parents = np.asarray(parents, dtype=np.int64)
        if not np.array_equal(parents, np.arange(self.cache.rows)):
            self.cache.reorder(parents)
        self._logits = self._mask(self.owner.backbone.step(np.asarray(tokens), self.cache))


# helpers ------------------------------------------------------------------------


def log_softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = logits / temperature
    m = np.max(z, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return z - m - np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True))


def _step_logprobs(session: DecodeSession, model: DecodingModel, step: int, min_length: int) -> np.ndarray:
    lp = log_softmax(session.logits())
    if step < min_length:
        lp = lp.copy()
        lp[:, model.eos] = NEG_INF
    return lp


def _max_steps(model: DecodingModel, max_steps: int) -> int:
    if max_steps > model.max_steps_limit:
        log.warning("max_steps %d clipped to model limit %d", max_steps, model.max_steps_limit)
    return min(max_steps, model.max_steps_limit)


@dataclass
class _Hyp:
    tokens: tuple[int, ...]
    logprobs: tuple[float, ...]
    score: float  # cumulative log-probability
    key: float  # ranking key (score, or perturbed score for SBS)
    row: int = -1

    def child(self, token: int, lp: float, key: float) -> "_Hyp":
        return _Hyp(self.tokens + (token,), self.logprobs + (lp,), self.score + lp, key)


def _rank_children(keys: np.ndarray, limit: int) -> list[tuple[int, int]]:
    """Top ``limit`` finite entries of a ``[parents, vocab]`` key array as (parent, token).

    Flattening is token-major so equal keys resolve to the lowest token id,
    then the earliest (higher-ranked) parent.
    """
    k, v = keys.shape
    flat = keys.T.ravel()
    order = np.argsort(-flat, kind="stable")[:limit]
    return [(int(i % k), int(i // k)) for i in order if np.isfinite(flat[i])]


def _retire_or_continue(
    parents: list[_Hyp],
    lp: np.ndarray,
    keys: np.ndarray,
    width: int,
    eos: int,
    finished: list[_Hyp],
) -> list[_Hyp]:
    """One beam update: EOS children ranked within the top ``width`` retire, ``width`` others continue."""
    live: list[_Hyp] = []
    for rank, (p, tok) in enumerate(_rank_children(keys, 2 * width)):
        h = parents[p].child(tok, float(lp[p, tok]), float(keys[p, tok]))
        h.row = parents[p].row
        if tok == eos:
            if rank < width:
                finished.append(h)
        elif len(live) < width:
            live.append(h)
    return live


def _order_key(h: _Hyp) -> tuple:
    return (-h.key, len(h.tokens), h.tokens)


def _done(finished: list[_Hyp], live: list[_Hyp], width: int) -> bool:
    if not live:
        return True
    if len(finished) < width:
        return False
    kth = sorted(finished, key=_order_key)[width - 1].key
    return kth >= max(h.key for h in live)


def _to_candidate(h: _Hyp, eos: int) -> Candidate:
    return Candidate(h.tokens, h.logprobs, None, eos)


def _advance(session: DecodeSession, live: list[_Hyp]) -> None:
    parents = np.array([h.row for h in live], dtype=np.int64)
    tokens = np.array([h.tokens[-1] for h in live], dtype=np.int64)
    session.advance(parents, tokens)
    for i, h in enumerate(live):
        h.row = i


# strategies ---------------------------------------------------------------------------


def greedy_batch(
    model: DecodingModel,
    x: Sequence[int],
    rows: int = 1,
    prefix: AttentionPrefix | None = None,
    max_steps: int = 24,
    min_length: int = 1,
) -> list[Candidate]:
    """Argmax decoding for ``rows`` independent rows (one per prefix)."""
    return _ancestral(model, x, rows, prefix, max_steps, min_length, None, None)


def greedy(model: DecodingModel, x: Sequence[int], prefix: AttentionPrefix | None = None, max_steps: int = 24, min_length: int = 1) -> Candidate:
    return greedy_batch(model, x, 1, prefix, max_steps, min_length)[0]


def sample(
    model: DecodingModel,
    x: Sequence[int],
    temperature: float,
    rng: np.random.Generator,
    n: int,
    prefix: AttentionPrefix | None = None,
    max_steps: int = 24,
    min_length: int = 1,
) -> list[Candidate]:
    """``n`` independent samples from ``softmax(logits / temperature)``.

    Recorded log-probabilities are those of the untempered model.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    return _ancestral(model, x, n, prefix, max_steps, min_length, temperature, rng)


def _ancestral(model, x, rows, prefix, max_steps, min_length, temperature, rng) -> list[Candidate]:
    steps = _max_steps(model, max_steps)
    session = model.start(x, rows, prefix)
    seqs = [[model.bos] for _ in range(rows)]
    lps: list[list[float]] = [[] for _ in range(rows)]
    active = list(range(rows))  # session row i holds sequence active[i]
    for t in range(steps):
        logits = session.logits()
        lp = log_softmax(logits)
        if t < min_length:
            # same convention as beam search: EOS is banned, the other log-probs stay unnormalized
            logits = logits.copy()
            logits[:, model.eos] = NEG_INF
            lp[:, model.eos] = NEG_INF
        if temperature is None:
            tokens = np.argmax(lp, axis=1)
        else:
            probs = np.exp(log_softmax(logits, temperature))
            cdf = np.cumsum(probs, axis=1)
            # u in (0, total] so the first index with cdf >= u always has mass
            u = (1.0 - rng.random(len(active))) * cdf[:, -1]
            tokens = np.minimum((cdf < u[:, None]).sum(axis=1), lp.shape[1] - 1)
        keep = []
        for i, seq_id in enumerate(active):
            tok = int(tokens[i])
            seqs[seq_id].append(tok)
            lps[seq_id].append(float(lp[i, tok]))
            if tok != model.eos:
                keep.append(i)
        if not keep or t + 1 == steps:
            break
        session.advance(np.array(keep), tokens[keep])
        active = [active[i] for i in keep]
    return [Candidate(tuple(s), tuple(l), None, model.eos) for s, l in zip(seqs, lps)]


def beam_search_multi(
    model: DecodingModel,
    x: Sequence[int],
    beam_width: int,
    n_problems: int = 1,
    prefix: AttentionPrefix | None = None,
    max_steps: int = 24,
    min_length: int = 1,
) -> list[list[Candidate]]:
    """Independent beam searches for ``n_problems`` rows of ``prefix`` sharing one input.

    Returns, per problem, up to ``beam_width`` distinct candidates ordered by
    cumulative log-probability.
    """
    if beam_width < 1:
        raise ValueError("beam width must be at least 1")
    steps = _max_steps(model, max_steps)
    session = model.start(x, n_problems, prefix)
    live = [[_Hyp((model.bos,), (), 0.0, 0.0, row=i)] for i in range(n_problems)]
    finished: list[list[_Hyp]] = [[] for _ in range(n_problems)]
    active = list(range(n_problems))
    for t in range(steps):
        lp_all = _step_logprobs(session, model, t, min_length)
        still = []
        for p in active:
            parents = live[p]
            lp = lp_all[[h.row for h in parents]]
            keys = np.array([h.score for h in parents])[:, None] + lp
            live[p] = _retire_or_continue(parents, lp, keys, beam_width, model.eos, finished[p])
            if not _done(finished[p], live[p], beam_width):
                still.append(p)
        active = still
        if not active or t + 1 == steps:
            break
        _advance(session, [h for p in active for h in live[p]])
    out = []
    for p in range(n_problems):
        pool = finished[p] + live[p]  # unfinished beams count once max_steps is hit
        out.append([_to_candidate(h, model.eos) for h in sorted(pool, key=_order_key)[:beam_width]])
    return out


def beam_search(
    model: DecodingModel,
    x: Sequence[int],
    beam_width: int,
    prefix: AttentionPrefix | None = None,
    max_steps: int = 24,
    min_length: int = 1,
) -> list[Candidate]:
    return beam_search_multi(model, x, beam_width, 1, prefix, max_steps, min_length)[0]


def _log1mexp(a: np.ndarray) -> np.ndarray:
    """log(1 - exp(a)) for a <= 0, stable at both ends."""
    a = np.minimum(a, 0.0)
    with np.errstate(divide="ignore"):
        return np.where(a > -0.693, np.log(-np.expm1(a)), np.log1p(-np.exp(a)))


def _truncated_gumbel(parent_g: float, raw: np.ndarray) -> np.ndarray:
    """Condition the children's perturbed scores on their maximum equalling ``parent_g``."""
    finite = np.isfinite(raw)
    out = np.full_like(raw, NEG_INF)
    if not finite.any():
        return out
    z = raw[finite].max()
    r = raw[finite]
    v = parent_g - r + _log1mexp(r - z)
    out[finite] = parent_g - np.maximum(v, 0.0) - np.log1p(np.exp(-np.abs(v)))
    return out


def stochastic_beam_search(
    model: DecodingModel,
    x: Sequence[int],
    beam_width: int,
    temperature: float,
    rng: np.random.Generator,
    prefix: AttentionPrefix | None = None,
    max_steps: int = 24,
    min_length: int = 1,
) -> list[Candidate]:
    """Sample ``beam_width`` distinct sequences without replacement via Gumbel-top-k.

    Sequences are drawn from the distribution proportional to
    ``p(y|x)^(1/temperature)``; each node carries the perturbed score of its
    subtree, propagated with truncated Gumbels. A node's subtree log-mass is
    estimated from its children (their log-sum-exp), and the parent's own
    Gumbel offset is carried over on top of it. At temperature 1 this is the
    exact sampler; as the temperature goes to 0 the ranking becomes that of
    beam search.
    """
    if beam_width < 1:
        raise ValueError("beam width must be at least 1")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    steps = _max_steps(model, max_steps)
    session = model.start(x, 1, prefix)
    live = [_Hyp((model.bos,), (), 0.0, 0.0, row=0)]
    finished: list[_Hyp] = []
    for t in range(steps):
        lp_all = _step_logprobs(session, model, t, min_length)
        lp = lp_all[[h.row for h in live]]
        keys = np.full(lp.shape, NEG_INF)
        for i, h in enumerate(live):
            phi = (h.score + lp[i]) / temperature
            finite = np.isfinite(phi)
            if not finite.any():
                continue
            offset = h.key - h.score / temperature
            target = float(np.logaddexp.reduce(phi[finite])) + offset
            raw = phi + rng.gumbel(size=phi.shape)
            keys[i] = _truncated_gumbel(target, np.where(finite, raw, NEG_INF))
        live = _retire_or_continue(live, lp, keys, beam_width, model.eos, finished)
        if _done(finished, live, beam_width) or t + 1 == steps:
            break
        _advance(session, live)
    pool = sorted(finished + live, key=_order_key)[:beam_width]
    return [_to_candidate(h, model.eos) for h in pool]


def diverse_beam_search(
    model: DecodingModel,
    x: Sequence[int],
    beam_width: int,
    groups: int,
    diversity_lambda: float,
    prefix: AttentionPrefix | None = None,
    max_steps: int = 24,
    min_length: int = 1,
) -> list[Candidate]:
    """Hamming-diverse beam search with ``groups`` groups of ``beam_width / groups`` beams.

    Groups are expanded in order at each step; a token already chosen by
    earlier groups at this step is penalized ``diversity_lambda`` per
    occurrence. Returns ``beam_width`` candidates (groups may coincide when
    the penalty is zero).
    """
    if groups < 1 or beam_width % groups:
        raise ValueError("groups must divide beam_width")
    if diversity_lambda < 0:
        raise ValueError("diversity_lambda must be non-negative")
    width = beam_width // groups
    steps = _max_steps(model, max_steps)
    session = model.start(x, groups, prefix)
    live = [[_Hyp((model.bos,), (), 0.0, 0.0, row=g)] for g in range(groups)]
    finished: list[list[_Hyp]] = [[] for _ in range(groups)]
    active = list(range(groups))
    for t in range(steps):
        lp_all = _step_logprobs(session, model, t, min_length)
        counts = np.zeros(lp_all.shape[1])
        still = []
        for g in range(groups):
            if g not in active:
                continue
            parents = live[g]
            lp = lp_all[[h.row for h in parents]]
            scores = np.array([h.score for h in parents])[:, None] + lp
            keys = scores - diversity_lambda * counts[None, :]
            n_before = len(finished[g])
            new_live = _retire_or_continue(parents, lp, keys, width, model.eos, finished[g])
            for h in new_live + finished[g][n_before:]:
                counts[h.tokens[-1]] += 1
                h.key = h.score  # completion and ordering use the unpenalized score
            live[g] = new_live
            if not _done(finished[g], live[g], width):
                still.append(g)
        active = still
        if not active or t + 1 == steps:
            break
        _advance(session, [h for g in active for h in live[g]])
    out: list[Candidate] = []
    for g in range(groups):
        pool = sorted(finished[g] + live[g], key=_order_key)[:width]
        out.extend(_to_candidate(h, model.eos) for h in pool)
    return out


def generate_vpt_candidates(
    model: BackboneDecoder,
    vpt,
    x: Sequence[int],
    n_latents: int,
    tau: float,
    rng: np.random.Generator,
    beam_width: int = 4,
    per_latent: str = "beam",
    max_steps: int = 24,
    standard_prior: bool = False,
) -> list[Candidate]:
    """One candidate per prior-sampled latent: the top beam (or greedy path) under its prefix."""
    latents = vpt.sample_prior(model.backbone, list(x), tau, rng, n_latents, standard_prior=standard_prior)
    if per_latent == "beam":
        per_problem = beam_search_multi(model, x, beam_width, n_latents, latents.prefix, max_steps)
        return [beams[0] for beams in per_problem]
    if per_latent == "greedy":
        return greedy_batch(model, x, n_latents, latents.prefix, max_steps)
    raise ValueError(f"unknown per-latent decoder {per_latent!r}")


def dedupe(candidates: Iterable[Candidate]) -> list[Candidate]:
    """Keep the best-scoring copy of each token sequence; order by score, then first appearance."""
    best: dict[tuple[int, ...], tuple[int, Candidate]] = {}
    for i, c in enumerate(candidates):
        if c.tokens not in best:
            best[c.tokens] = (i, c)
        elif c.normalized_score > best[c.tokens][1].normalized_score:
            best[c.tokens] = (best[c.tokens][0], c)
    ranked = sorted(best.values(), key=lambda item: (-item[1].normalized_score, item[0]))
    return [c for _, c in ranked]


def rescore(backbone: Backbone, x: Sequence[int], candidates: Sequence[Candidate], batch_size: int = 128) -> list[Candidate]:
    """Attach ``quality``: length-normalized log-probability under the prefix-free backbone."""
    if not candidates:
        return []
    backbone.eval()
    out: list[Candidate] = []
    with no_grad():
        memory = backbone.encode(np.asarray([list(x)]))
        for start in range(0, len(candidates), batch_size):
            chunk = candidates[start : start + batch_size]
            ids, _ = pad_batch([list(c.tokens) for c in chunk])
            y_in, y_out = ids[:, :-1], ids[:, 1:]
            rows = len(chunk)
            mem = ContextualEmbeddings(Tensor.wrap(np.repeat(memory.values.data, rows, axis=0)), np.repeat(memory.mask, rows, axis=0))
            logits = backbone.decode(y_in, mem).data.astype(np.float64)
            logits[..., list(BackboneDecoder.banned)] = NEG_INF  # decoding never emits these
            lp = log_softmax(logits)
            for i, c in enumerate(chunk):
                n = len(c.tokens) - 1
                total = float(lp[i, np.arange(n), y_out[i, :n]].sum())
                out.append(c.with_quality(total / max(c.length, 1)))
    return out


# serialization ---------------------------------------------------------------------


@dataclass
class CandidateSet:
    id: str
    strategy: str
    candidates: list[Candidate] = field(default_factory=list)
    selected: list[int] | None = None  # indices into candidates after subset selection

    def to_json(self, vocab: Vocabulary) -> dict:
        obj = {
            "id": self.id,
            "strategy": self.strategy,
            "candidates": [
                {
                    "text": vocab.decode_text(c.content),
                    "logprobs": [round(v, 6) for v in c.logprobs],
                    "finished": c.finished,
                    "score": round(c.normalized_score, 6),
                    "quality": None if c.quality is None else round(c.quality, 6),
                }
                for c in self.candidates
            ],
        }
        if self.selected is not None:
            obj["selected"] = list(self.selected)
        return obj

    @classmethod
    def from_json(cls, obj: dict, vocab: Vocabulary) -> "CandidateSet":
        try:
            cands = []
            for c in obj["candidates"]:
                body = vocab.encode_text(c["text"])
                tokens = (BOS, *body, EOS) if c.get("finished", True) else (BOS, *body)
                cands.append(Candidate(tuple(tokens), tuple(float(v) for v in c["logprobs"]), c.get("quality")))
            return cls(str(obj["id"]), str(obj["strategy"]), cands, obj.get("selected"))
        except (KeyError, TypeError, ShapeError) as exc:
            raise DataError(f"malformed candidate set: {exc}") from exc

    def texts(self, vocab: Vocabulary, selected_only: bool = False) -> list[list[str]]:
        chosen = self.candidates if not selected_only or self.selected is None else [self.candidates[i] for i in self.selected]
        return [vocab.decode(list(c.content)) for c in chosen]


def save_candidate_sets(path: str | Path, sets: Iterable[CandidateSet], vocab: Vocabulary) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for s in sets:
            fh.write(json.dumps(s.to_json(vocab), sort_keys=True) + "\n")
    tmp.replace(path)


def load_candidate_sets(path: str | Path, vocab: Vocabulary) -> list[CandidateSet]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(CandidateSet.from_json(json.loads(line), vocab))
            except (json.JSONDecodeError, DataError) as exc:
                raise DataError(f"line {n}: {exc}") from exc
    return out


def sequence_logprob(model: DecodingModel, x: Sequence[int], tokens: Sequence[int], min_length: int = 1) -> float:
    """Total log-probability of a full sequence ``BOS ... EOS`` under ``model`` (for oracles)."""
    session = model.start(x, 1)
    total = 0.0
    for t, tok in enumerate(tokens[1:]):
        lp = _step_logprobs(session, model, t, min_length)[0]
        total += float(lp[tok])
        if not math.isfinite(total):
            return total
        if t + 2 < len(tokens):
            session.advance(np.array([0]), np.array([tok]))
    return total
