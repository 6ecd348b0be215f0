"""Phase 1: teacher-forced training of the backbone on (code, reference) pairs."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from vptlab.backbone.model import Backbone, pad_batch, wrap_source, wrap_target
from vptlab.corpus import PAD, Example, Vocabulary
from vptlab.errors import NumericError
from vptlab.numerics import functional as F
from vptlab.numerics.optim import Adam
from vptlab.numerics.tensor import no_grad

log = logging.getLogger(__name__)


@dataclass
class EncodedExample:
    id: str
    src: list[int]
    refs: list[list[int]]  # BOS ... EOS


def encode_examples(examples: list[Example], vocab: Vocabulary, max_len: int) -> list[EncodedExample]:
    return [
        EncodedExample(
            ex.id,
            wrap_source(vocab.encode(ex.code), max_len),
            [wrap_target(vocab.encode(r), max_len) for r in ex.refs],
        )
        for ex in examples
    ]


def make_pairs(encoded: list[EncodedExample]) -> list[tuple[list[int], list[int]]]:
    """One training pair per (example, reference)."""
    return [(e.src, r) for e in encoded for r in e.refs]


def batch_arrays(pairs: list[tuple[list[int], list[int]]]):
    src, src_valid = pad_batch([p[0] for p in pairs])
    tgt, _ = pad_batch([p[1] for p in pairs])
    return src, src_valid, tgt[:, :-1], tgt[:, 1:]


def teacher_forced_loss(model: Backbone, pairs, reduction: str = "mean"):
    src, src_valid, y_in, y_out = batch_arrays(pairs)
    memory = model.encode(src, src_valid)
    logits = model.decode(y_in, memory)
    return F.cross_entropy(logits, y_out, pad_id=PAD, reduction=reduction)


@dataclass
class TokenAccuracy:
    single: float  # prediction equals the reference token being forced
    multi: float  # prediction continues some reference sharing the forced prefix
    loss: float


def evaluate_token_accuracy(model: Backbone, encoded: list[EncodedExample], batch_size: int = 64) -> TokenAccuracy:
    """Teacher-forced next-token accuracy on every (example, reference) pair.

    With several references per input, a position is counted correct under
    ``multi`` when the predicted token is the next token of any reference of
    the same example that agrees with the forced prefix so far.
    """
    model.eval()
    hits = hits_multi = total = 0
    loss_sum = 0.0
    items = []
    for e in encoded:
        allowed: dict[tuple[int, ...], set[int]] = {}
        for r in e.refs:
            for t in range(1, len(r)):
                allowed.setdefault(tuple(r[:t]), set()).add(r[t])
        for r in e.refs:
            items.append((e.src, r, allowed))
    with no_grad():
        for start in range(0, len(items), batch_size):
            chunk = items[start : start + batch_size]
            pairs = [(s, r) for s, r, _ in chunk]
            src, src_valid, y_in, y_out = batch_arrays(pairs)
            logits = model.decode(y_in, model.encode(src, src_valid))
            n_tok = int((y_out != PAD).sum())
            loss_sum += float(F.cross_entropy(logits, y_out, pad_id=PAD).data) * n_tok
            pred = logits.data.argmax(axis=-1)
            for row, (_, r, allowed) in enumerate(chunk):
                for t in range(len(r) - 1):
                    p = int(pred[row, t])
                    hits += p == r[t + 1]
                    hits_multi += p in allowed[tuple(r[: t + 1])]
                    total += 1
    return TokenAccuracy(hits / total, hits_multi / total, loss_sum / total)


@dataclass
class TrainHistory:
    step_losses: list[float] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def loss_curve_csv(self) -> str:
        lines = ["step,loss"]
        lines += [f"{i},{v:.6f}" for i, v in enumerate(self.step_losses)]
        return "\n".join(lines) + "\n"

    def epochs_csv(self) -> str:
        if not self.epochs:
            return ""
        keys = list(self.epochs[0])
        lines = [",".join(keys)]
        lines += [",".join(f"{row[k]:.6f}" if isinstance(row[k], float) else str(row[k]) for k in keys) for row in self.epochs]
        return "\n".join(lines) + "\n"


def train_backbone(
    model: Backbone,
    train: list[EncodedExample],
    valid: list[EncodedExample],
    epochs: int,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
    eval_every: int = 1,
    max_valid: int | None = 200,
) -> TrainHistory:
    """Train all backbone parameters with Adam on teacher-forced cross-entropy.

    Raises :class:`NumericError` when the loss stops being finite.
    """
    rng = np.random.default_rng(seed)
    model.dropout_rng = np.random.default_rng(seed + 7)
    opt = Adam(model.parameters(), lr=lr)
    pairs = make_pairs(train)
    history = TrainHistory()
    valid_subset = valid if max_valid is None else valid[:max_valid]
    for epoch in range(1, epochs + 1):
        model.train()
        t0 = time.perf_counter()
        order = rng.permutation(len(pairs))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), batch_size):
            batch = [pairs[i] for i in order[start : start + batch_size]]
            loss = teacher_forced_loss(model, batch)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(
                    f"backbone loss diverged at epoch {epoch}, step {len(history.step_losses)}; "
                    f"last losses {history.step_losses[-5:]}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.step_losses.append(value)
            epoch_loss += value
            n_batches += 1
        row = {"epoch": epoch, "train_loss": epoch_loss / max(n_batches, 1), "seconds": time.perf_counter() - t0}
        if valid_subset and (epoch % eval_every == 0 or epoch == epochs):
            acc = evaluate_token_accuracy(model, valid_subset)
            row.update(valid_loss=acc.loss, valid_acc=acc.single, valid_acc_multi=acc.multi)
        history.epochs.append(row)
        log.info("backbone epoch %d: %s", epoch, {k: round(v, 4) if isinstance(v, float) else v for k, v in row.items()})
    model.eval()
    return history
