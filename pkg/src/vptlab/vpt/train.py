"""Phase 2: ELBO training of the prefix component on top of a frozen backbone."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from vptlab.backbone.model import Backbone
from vptlab.backbone.train import EncodedExample, batch_arrays, make_pairs
from vptlab.corpus import PAD
from vptlab.errors import NumericError
from vptlab.numerics import functional as F
from vptlab.numerics.optim import Adam
from vptlab.numerics.tensor import Tensor, no_grad
from vptlab.vpt.model import VPT, kl_divergence, kl_weight, reparameterize

log = logging.getLogger(__name__)


@dataclass
class LossParts:
    reconstruction: Tensor
    kl: Tensor
    weight: float
    total: Tensor


def vpt_loss(
    backbone: Backbone,
    vpt: VPT,
    pairs: list[tuple[list[int], list[int]]],
    weight: float,
    rng: np.random.Generator,
) -> LossParts:
    """Negative ELBO: summed per-sequence NLL under a posterior latent plus ``weight`` times KL."""
    src, src_valid, y_in, y_out = batch_arrays(pairs)
    post_ids, post_valid = vpt.posterior_batch(pairs)
    with no_grad():
        memory = backbone.encode(src, src_valid)
    mu_p = vpt.prior_forward(backbone, src, src_valid)
    q = vpt.posterior_forward(backbone, post_ids, post_valid, mu_p)
    z = reparameterize(q.mu, q.sigma, rng)
    logits = backbone.decode(y_in, memory, vpt.z_to_prefix(z))
    recon = F.cross_entropy(logits, y_out, pad_id=PAD, reduction="sequence")
    kl = kl_divergence(q, mu_p, vpt.cfg.prior_sigma_train)
    total = F.add(recon, F.scale(kl, weight)) if weight else recon
    return LossParts(recon, kl, weight, total)


@dataclass
class VPTHistory:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    cycle_len: int = 0

    def loss_curve_csv(self) -> str:
        lines = ["step,reconstruction,kl,kl_weight,total"]
        lines += [
            f"{i},{r['reconstruction']:.6f},{r['kl']:.6f},{r['kl_weight']:.6f},{r['total']:.6f}"
            for i, r in enumerate(self.steps)
        ]
        return "\n".join(lines) + "\n"

    @property
    def final_kl(self) -> float | None:
        for row in reversed(self.epochs):
            if "valid_kl" in row:
                return row["valid_kl"]
        return None


def evaluate_vpt(backbone: Backbone, vpt: VPT, encoded: list[EncodedExample], batch_size: int = 64, seed: int = 0) -> dict:
    """Mean per-sequence reconstruction NLL and mean KL (nats per example) in eval mode."""
    vpt.eval()
    rng = np.random.default_rng(seed)
    pairs = make_pairs(encoded)
    recon = kl = 0.0
    with no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start : start + batch_size]
            parts = vpt_loss(backbone, vpt, chunk, 1.0, rng)
            recon += float(parts.reconstruction.data) * len(chunk)
            kl += float(parts.kl.data) * len(chunk)
    return {"reconstruction": recon / len(pairs), "kl": kl / len(pairs)}


def train_vpt(
    backbone: Backbone,
    vpt: VPT,
    train: list[EncodedExample],
    epochs: int,
    valid: list[EncodedExample] | None = None,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
    max_valid: int | None = 200,
) -> VPTHistory:
    """Freeze the backbone and fit the prior/posterior/prefix parameters.

    The KL weight follows ``kl_cycles`` cycles over the whole run; with
    ``anneal`` off it is held at 1.
    """
    backbone.freeze()
    backbone.eval()
    vpt.train()
    rng = np.random.default_rng(seed)
    opt = Adam(vpt.parameters(), lr=lr)
    pairs = make_pairs(train)
    steps_per_epoch = math.ceil(len(pairs) / batch_size)
    total_steps = epochs * steps_per_epoch
    cycle_len = max(2, total_steps // max(vpt.cfg.kl_cycles, 1))
    history = VPTHistory(cycle_len=cycle_len)
    valid_subset = None if valid is None else (valid if max_valid is None else valid[:max_valid])
    step = 0
    for epoch in range(1, epochs + 1):
        vpt.train()
        t0 = time.perf_counter()
        order = rng.permutation(len(pairs))
        sums = {"reconstruction": 0.0, "kl": 0.0}
        n_batches = 0
        for start in range(0, len(order), batch_size):
            batch = [pairs[i] for i in order[start : start + batch_size]]
            if len(batch) < 2:
                continue  # batch norm needs two rows
            w = kl_weight(step, cycle_len, vpt.cfg.kl_ramp_fraction) if vpt.cfg.anneal else 1.0
            parts = vpt_loss(backbone, vpt, batch, w, rng)
            value = float(parts.total.data)
            if not math.isfinite(value):
                raise NumericError(f"VPT loss diverged at step {step}; last rows {history.steps[-3:]}")
            opt.zero_grad()
            parts.total.backward()
            opt.step()
            row = {
                "reconstruction": float(parts.reconstruction.data),
                "kl": float(parts.kl.data),
                "kl_weight": w,
                "total": value,
            }
            history.steps.append(row)
            sums["reconstruction"] += row["reconstruction"]
            sums["kl"] += row["kl"]
            n_batches += 1
            step += 1
        summary = {
            "epoch": epoch,
            "train_reconstruction": sums["reconstruction"] / max(n_batches, 1),
            "train_kl": sums["kl"] / max(n_batches, 1),
            "seconds": time.perf_counter() - t0,
        }
        if valid_subset:
            ev = evaluate_vpt(backbone, vpt, valid_subset, seed=seed)
            summary.update(valid_reconstruction=ev["reconstruction"], valid_kl=ev["kl"])
        history.epochs.append(summary)
        log.info("vpt epoch %d: %s", epoch, {k: round(v, 4) if isinstance(v, float) else v for k, v in summary.items()})
    vpt.eval()
    return history
