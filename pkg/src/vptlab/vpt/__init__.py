"""Variational prefix component: prior/posterior nets and phase-2 training."""

from vptlab.vpt.model import (
    SIGMA_FLOOR,
    VPT,
    LatentSample,
    PosteriorOutput,
    VPTConfig,
    kl_divergence,
    kl_weight,
    parameter_budget,
    posterior_input,
    reparameterize,
)
from vptlab.vpt.train import LossParts, VPTHistory, evaluate_vpt, train_vpt, vpt_loss

__all__ = [
    "SIGMA_FLOOR",
    "VPT",
    "LatentSample",
    "LossParts",
    "PosteriorOutput",
    "VPTConfig",
    "VPTHistory",
    "evaluate_vpt",
    "kl_divergence",
    "kl_weight",
    "parameter_budget",
    "posterior_input",
    "reparameterize",
    "train_vpt",
    "vpt_loss",
]
