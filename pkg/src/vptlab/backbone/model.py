"""Encoder-decoder transformer whose decoder self-attention accepts key/value prefixes."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from vptlab.corpus import BOS, EOS, PAD
from vptlab.errors import ShapeError
from vptlab.numerics import functional as F
from vptlab.numerics.nn import Embedding, LayerNorm, Linear, Module
from vptlab.numerics.tensor import Parameter, Tensor, get_dtype, no_grad

log = logging.getLogger(__name__)


@dataclass
class BackboneConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 64
    dropout_rate: float = 0.2

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ContextualEmbeddings:
    values: Tensor  # [batch, seq, d_model]
    mask: np.ndarray  # [batch, seq] bool, True where the position is real

    def __post_init__(self):
        if self.mask.shape != self.values.shape[:2]:
            raise ShapeError(f"mask {self.mask.shape} does not match values {self.values.shape}")


@dataclass
class AttentionPrefix:
    """Per-layer key and value prefixes, each ``[batch, heads, prefix_len, d_k]``."""

    keys: list[Tensor]
    values: list[Tensor]

    def __post_init__(self):
        if len(self.keys) != len(self.values):
            raise ShapeError("keys and values must cover the same layers")
        shapes = {k.shape for k in self.keys} | {v.shape for v in self.values}
        if len(shapes) > 1:
            raise ShapeError(f"inconsistent prefix shapes: {shapes}")

    @property
    def prefix_len(self) -> int:
        return self.keys[0].shape[2] if self.keys else 0

    @property
    def batch(self) -> int:
        return self.keys[0].shape[0]

    def select(self, rows: np.ndarray) -> "AttentionPrefix":
        return AttentionPrefix([F.getitem(k, rows) for k in self.keys], [F.getitem(v, rows) for v in self.values])

    @classmethod
    def empty(cls, cfg: BackboneConfig, batch: int) -> "AttentionPrefix":
        z = np.zeros((batch, cfg.n_heads, 0, cfg.d_k), dtype=get_dtype())
        return cls([Tensor.wrap(z) for _ in range(cfg.n_layers)], [Tensor.wrap(z) for _ in range(cfg.n_layers)])


def sinusoidal_positions(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _additive(mask: np.ndarray | None, dtype) -> np.ndarray | None:
    if mask is None:
        return None
    return np.where(mask, 0.0, F.NEG_INF).astype(dtype)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return F.transpose(F.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dk = x.shape
    return F.reshape(F.transpose(x, (0, 2, 1, 3)), (b, t, h * dk))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None) -> Tensor:
    """softmax(q k^T / sqrt(d_k) + mask) v over ``[batch, heads, len, d_k]`` operands."""
    d_k = q.shape[-1]
    scores = F.scale(F.matmul(q, F.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d_k))
    add = _additive(mask, scores.dtype)
    if add is not None:
        scores = F.add(scores, add)
    return F.matmul(F.softmax(scores, axis=-1), v)


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        self.n_heads = n_heads
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)

    def project_kv(self, kv_in: Tensor) -> tuple[Tensor, Tensor]:
        return _split_heads(self.wk(kv_in), self.n_heads), _split_heads(self.wv(kv_in), self.n_heads)

    def __call__(
        self,
        q_in: Tensor,
        kv_in: Tensor | None = None,
        mask: np.ndarray | None = None,
        prefix: tuple[Tensor, Tensor] | None = None,
        kv: tuple[Tensor, Tensor] | None = None,
    ) -> Tensor:
        """Multi-head attention of ``q_in`` over ``kv_in``.

        ``mask`` is a boolean array broadcastable to ``[batch, 1, len_q, len_kv]``
        (True = may attend). ``prefix`` key/value tensors are prepended after
        projection and are visible to every query. ``kv`` supplies already
        projected keys and values instead of ``kv_in``.
        """
        q = _split_heads(self.wq(q_in), self.n_heads)
        if kv is None:
            if kv_in is None:
                raise ValueError("need kv_in or precomputed kv")
            k, v = self.project_kv(kv_in)
        else:
            k, v = kv
        if mask is not None and mask.shape[-1] != k.shape[2]:
            raise ShapeError(f"mask covers {mask.shape[-1]} keys, sequence has {k.shape[2]}")
        if prefix is not None and prefix[0].shape[2] > 0:
            pk, pv = prefix
            if pk.shape[0] != k.shape[0] or pk.shape[1] != k.shape[1] or pk.shape[3] != k.shape[3]:
                raise ShapeError(f"prefix {pk.shape} incompatible with keys {k.shape}")
            k = F.concat([pk, k], axis=2)
            v = F.concat([pv, v], axis=2)
            if mask is not None:
                m = np.broadcast_to(mask, mask.shape[:-1] + (mask.shape[-1],))
                lead = np.ones(m.shape[:-1] + (pk.shape[2],), dtype=bool)
                mask = np.concatenate([lead, m], axis=-1)
        return self.wo(_merge_heads(scaled_dot_attention(q, k, v, mask)))


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        self.w1 = Linear(d_model, d_ff, rng)
        self.w2 = Linear(d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(F.relu(self.w1(x)))


class EncoderLayer(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.ln1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.ln2 = LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, rng)


class DecoderLayer(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.ln1 = LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.ln2 = LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.ln3 = LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, rng)


class DecoderCache:
    """Incremental decoding state for a batch of rows.

    Holds projected self-attention keys/values (prefix first, then generated
    tokens) and the cross-attention keys/values of the encoder memory.
    """

    def __init__(self, self_kv, cross_kv, memory_mask: np.ndarray, position: int = 0):
        self.self_kv = self_kv  # per layer [k, v] arrays [rows, heads, len, d_k]
        self.cross_kv = cross_kv  # per layer (k, v) arrays [rows, heads, src, d_k]
        self.memory_mask = memory_mask  # [rows, src]
        self.position = position

    def reorder(self, rows: np.ndarray) -> None:
        self.self_kv = [[k[rows], v[rows]] for k, v in self.self_kv]
        self.cross_kv = [(k[rows], v[rows]) for k, v in self.cross_kv]
        self.memory_mask = self.memory_mask[rows]

    @property
    def rows(self) -> int:
        return self.memory_mask.shape[0]


class Backbone(Module):
    """Pre-LayerNorm transformer encoder-decoder with a shared, tied embedding table."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.embed = Embedding(cfg.vocab_size, cfg.d_model, rng)
        self.enc_layers = [EncoderLayer(cfg, rng) for _ in range(cfg.n_layers)]
        self.enc_ln = LayerNorm(cfg.d_model)
        self.dec_layers = [DecoderLayer(cfg, rng) for _ in range(cfg.n_layers)]
        self.dec_ln = LayerNorm(cfg.d_model)
        self.out_bias = Parameter(np.zeros(cfg.vocab_size), dtype=get_dtype())
        self.positions = sinusoidal_positions(cfg.max_len, cfg.d_model)
        self.dropout_rng = np.random.default_rng(seed + 1)
        self._emb_scale = math.sqrt(cfg.d_model)

    # helpers ----------------------------------------------------------------

    def _dropout(self, x: Tensor) -> Tensor:
        return F.dropout(x, self.cfg.dropout_rate, self.dropout_rng, self.training)

    def _embed(self, ids: np.ndarray, start: int = 0) -> Tensor:
        t = ids.shape[1]
        if start + t > self.cfg.max_len:
            raise ShapeError(f"sequence of length {start + t} exceeds max_len {self.cfg.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise IndexError("token id out of vocabulary")
        x = F.scale(self.embed(ids), self._emb_scale)
        pe = self.positions[start : start + t].astype(x.dtype)
        return F.add(x, pe)

    # encoder ----------------------------------------------------------------

    def encode(self, ids: np.ndarray, valid: np.ndarray | None = None, pool: Tensor | None = None) -> ContextualEmbeddings:
        """Run the encoder over padded token ids ``[batch, seq]``.

        ``pool`` (``[n_pool, d_model]`` or ``[batch, n_pool, d_model]``) is
        prepended as extra positions without positional encoding; the output
        then starts with the pooled positions.
        """
        ids = np.asarray(ids)
        if valid is None:
            valid = ids != PAD
        x = self._embed(ids)
        if pool is not None:
            b = ids.shape[0]
            if pool.ndim == 2:
                pool = F.add(np.zeros((b,) + pool.shape, dtype=x.dtype), pool)
            x = F.concat([pool, x], axis=1)
            valid = np.concatenate([np.ones((b, pool.shape[1]), dtype=bool), valid], axis=1)
        x = self._dropout(x)
        mask = valid[:, None, None, :]
        for layer in self.enc_layers:
            h = layer.ln1(x)
            x = F.add(x, self._dropout(layer.attn(h, h, mask)))
            x = F.add(x, self._dropout(layer.ff(layer.ln2(x))))
        return ContextualEmbeddings(self.enc_ln(x), valid)

    # decoder ----------------------------------------------------------------

    def _logits(self, h: Tensor) -> Tensor:
        return F.add(F.matmul(self.dec_ln(h), F.transpose(self.embed.weight, (1, 0))), self.out_bias)

    def decode(self, y_in: np.ndarray, memory: ContextualEmbeddings, prefix: AttentionPrefix | None = None) -> Tensor:
        """Teacher-forced logits ``[batch, len, vocab]`` for decoder inputs ``y_in``."""
        y_in = np.asarray(y_in)
        b, t = y_in.shape
        if prefix is not None and len(prefix.keys) != self.cfg.n_layers:
            raise ShapeError("prefix must cover every decoder layer")
        x = self._dropout(self._embed(y_in))
        causal = np.tril(np.ones((t, t), dtype=bool))[None, None]
        cross_mask = memory.mask[:, None, None, :]
        for i, layer in enumerate(self.dec_layers):
            pre = None if prefix is None else (prefix.keys[i], prefix.values[i])
            h = layer.ln1(x)
            x = F.add(x, self._dropout(layer.self_attn(h, h, causal, prefix=pre)))
            x = F.add(x, self._dropout(layer.cross_attn(layer.ln2(x), memory.values, cross_mask)))
            x = F.add(x, self._dropout(layer.ff(layer.ln3(x))))
        return self._logits(x)

    def decode_step(self, enc: ContextualEmbeddings, y_prefix_tokens: np.ndarray, prefix: AttentionPrefix | None = None) -> np.ndarray:
        """Next-token logits ``[batch, vocab]`` after ``y_prefix_tokens`` (which start with BOS)."""
        y = np.asarray(y_prefix_tokens)
        if y.ndim == 1:
            y = y[None]
        if not np.all(y[:, 0] == BOS):
            raise ValueError("decoder input must begin with BOS")
        with no_grad():
            return self.decode(y, enc, prefix).data[:, -1]

    # incremental decoding -----------------------------------------------------

    def start_cache(self, memory: ContextualEmbeddings, prefix: AttentionPrefix | None = None) -> DecoderCache:
        with no_grad():
            cross = [layer.cross_attn.project_kv(memory.values) for layer in self.dec_layers]
        cross_kv = [(k.data, v.data) for k, v in cross]
        rows = memory.values.shape[0]
        self_kv = []
        for i in range(self.cfg.n_layers):
            if prefix is None or prefix.prefix_len == 0:
                z = np.zeros((rows, self.cfg.n_heads, 0, self.cfg.d_k), dtype=memory.values.dtype)
                self_kv.append([z, z])
            else:
                self_kv.append([prefix.keys[i].data, prefix.values[i].data])
        return DecoderCache(self_kv, cross_kv, memory.mask.copy())

    def step(self, tokens: np.ndarray, cache: DecoderCache) -> np.ndarray:
        """Feed one token per row; returns next-token logits ``[rows, vocab]``."""
        tokens = np.asarray(tokens).reshape(-1, 1)
        with no_grad():
            x = self._embed(tokens, start=cache.position)
            cross_mask = cache.memory_mask[:, None, None, :]
            for i, layer in enumerate(self.dec_layers):
                attn = layer.self_attn
                h = layer.ln1(x)
                k_new, v_new = attn.project_kv(h)
                kv = cache.self_kv[i]
                kv[0] = np.concatenate([kv[0], k_new.data], axis=2)
                kv[1] = np.concatenate([kv[1], v_new.data], axis=2)
                x = F.add(x, attn(h, kv=(Tensor.wrap(kv[0]), Tensor.wrap(kv[1]))))
                ck, cv = cache.cross_kv[i]
                x = F.add(x, layer.cross_attn(layer.ln2(x), mask=cross_mask, kv=(Tensor.wrap(ck), Tensor.wrap(cv))))
                x = F.add(x, layer.ff(layer.ln3(x)))
            logits = self._logits(x).data[:, 0]
        cache.position += 1
        return logits


def pad_batch(seqs: list[list[int]], pad: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, ids != pad


def wrap_source(ids: list[int], max_len: int) -> list[int]:
    """BOS + ids + EOS, truncating ``ids`` with a warning when too long."""
    if len(ids) + 2 > max_len:
        log.warning("truncating source of length %d to max_len %d", len(ids), max_len)
        ids = ids[: max_len - 2]
    return [BOS] + list(ids) + [EOS]


def wrap_target(ids: list[int], max_len: int) -> list[int]:
    if len(ids) + 2 > max_len:
        log.warning("truncating target of length %d to max_len %d", len(ids), max_len)
        ids = ids[: max_len - 2]
    return [BOS] + list(ids) + [EOS]
