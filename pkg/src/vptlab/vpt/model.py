"""Prior net, posterior net, latent sampling and latent-to-prefix projection."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from vptlab.backbone.model import AttentionPrefix, Backbone, BackboneConfig, FeedForward, MultiHeadAttention, pad_batch
from vptlab.corpus import BOS, EOS, SEP
from vptlab.errors import DataError, NumericError, ShapeError
from vptlab.numerics import functional as F
from vptlab.numerics.nn import BatchNorm, LayerNorm, Linear, Module
from vptlab.numerics.tensor import Parameter, Tensor, get_dtype, no_grad

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-4


@dataclass
class VPTConfig:
    n_pool_tokens: int = 2
    prior_sigma_train: float = 1.0
    kl_cycles: int = 4
    kl_ramp_fraction: float = 0.5
    bn_gamma: float = 0.5
    prefix_hidden: int = 64
    posterior_encoder: str = "frozen"  # or "trainable"
    use_batchnorm: bool = True
    anneal: bool = True
    residual_mean: bool = True  # posterior mean = prior mean + batch-normalized offset

    def __post_init__(self):
        if not 0 < self.kl_ramp_fraction <= 1:
            raise ValueError("kl_ramp_fraction must lie in (0, 1]")
        if self.posterior_encoder not in ("frozen", "trainable"):
            raise ValueError("posterior_encoder must be 'frozen' or 'trainable'")
        if self.n_pool_tokens < 1:
            raise ValueError("need at least one pooling token")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PosteriorOutput:
    mu: Tensor  # [batch, n_pool, latent]
    sigma: Tensor  # same shape, > 0
    offset: Tensor | None = None  # head output before the prior mean is added


@dataclass
class LatentSample:
    """A batch of latent draws and the attention prefixes they project to."""

    z: Tensor  # [n, n_pool, latent]
    source: str  # "prior" or "posterior"
    prefix: AttentionPrefix

    def __len__(self) -> int:
        return self.z.shape[0]


def kl_weight(step: int, cycle_len: int, ramp_fraction: float = 0.5) -> float:
    """Cyclic schedule: linear ramp from 0 to 1 over the first ``ramp_fraction`` of each cycle, then hold."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if cycle_len < 2:
        raise ValueError("cycle length must be at least 2")
    return min(1.0, (step % cycle_len) / (ramp_fraction * cycle_len))


def kl_divergence(q: PosteriorOutput, mu_p, sigma_p: float = 1.0) -> Tensor:
    """KL(q || N(mu_p, sigma_p^2)) summed over latent dims, averaged over the batch."""
    if q.mu.shape != q.sigma.shape or (isinstance(mu_p, Tensor) and mu_p.shape != q.mu.shape):
        raise ShapeError("posterior and prior shapes disagree")
    per_dim = F.gaussian_kl(q.mu, q.sigma, mu_p, sigma_p)
    b = per_dim.shape[0]
    return F.mean(F.sum(F.reshape(per_dim, (b, -1)), axis=1))


def reparameterize(mu: Tensor, sigma: Tensor, rng: np.random.Generator) -> Tensor:
    """z = mu + sigma * eps with eps ~ N(0, I); eps carries no gradient."""
    eps = rng.standard_normal(mu.shape).astype(mu.dtype)
    return F.add(mu, F.mul(sigma, eps))


def posterior_input(src: list[int], tgt: list[int], max_len: int) -> list[int]:
    """BOS code SEP summary EOS from wrapped source/target ids, truncating the summary first."""
    code = [t for t in src if t not in (BOS, EOS)]
    summary = [t for t in tgt if t not in (BOS, EOS)]
    if not summary:
        raise DataError("posterior needs a non-empty summary")
    budget = max_len - 3
    if len(code) + len(summary) > budget:
        log.warning("truncating posterior input of length %d to %d", len(code) + len(summary) + 3, max_len)
        keep_summary = max(1, budget - len(code))
        summary = summary[:keep_summary]
        code = code[: budget - len(summary)]
    return [BOS] + code + [SEP] + summary + [EOS]


class PosteriorAttention(Module):
    """Trainable one-layer self-attention encoder for backbones without bi-modal pre-training."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.ln1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.ln2 = LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, rng)
        self.ln_out = LayerNorm(cfg.d_model)

    def __call__(self, x: Tensor, valid: np.ndarray) -> Tensor:
        mask = valid[:, None, None, :]
        h = self.ln1(x)
        x = F.add(x, self.attn(h, h, mask))
        x = F.add(x, self.ff(self.ln2(x)))
        return self.ln_out(x)


class VPT(Module):
    """All trainable parameters of the variational prefix component."""

    def __init__(self, backbone_cfg: BackboneConfig, cfg: VPTConfig, seed: int = 0):
        self.bcfg = backbone_cfg
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, p = backbone_cfg.d_model, cfg.n_pool_tokens
        dtype = get_dtype()
        self.prior_pool = Parameter(rng.normal(0.0, 0.02, size=(p, d)), dtype=dtype)
        self.post_pool = Parameter(rng.normal(0.0, 0.02, size=(p, d)), dtype=dtype)
        self.mu_head = Linear(d, d, rng)
        self.sigma_head = Linear(d, d, rng)
        if cfg.use_batchnorm:
            self.mu_bn = BatchNorm(p * d, fixed_gamma=cfg.bn_gamma)
            self.sigma_bn = BatchNorm(p * d)
        self.prefix_in = Linear(d, cfg.prefix_hidden, rng)
        self.prefix_out = Linear(cfg.prefix_hidden, 2 * backbone_cfg.n_layers * d, rng)
        if cfg.posterior_encoder == "trainable":
            self.post_attn = PosteriorAttention(backbone_cfg, rng)

    @property
    def latent_dim(self) -> int:
        return self.bcfg.d_model

    # distributions ----------------------------------------------------------------

    def prior_forward(self, backbone: Backbone, src: np.ndarray, src_valid: np.ndarray | None = None) -> Tensor:
        """Prior mean: contextual embeddings of the prior pooling tokens, ``[batch, n_pool, d]``."""
        enc = backbone.encode(src, src_valid, pool=self.prior_pool)
        return F.getitem(enc.values, (slice(None), slice(0, self.cfg.n_pool_tokens)))

    def posterior_forward(
        self,
        backbone: Backbone,
        post_ids: np.ndarray,
        post_valid: np.ndarray | None = None,
        prior_mu: Tensor | None = None,
    ) -> PosteriorOutput:
        """Posterior mean and std from the pooled outputs over ``BOS x SEP y EOS``.

        With ``residual_mean`` the mean head predicts an offset from
        ``prior_mu``. The fixed-scale batch norm on that offset then keeps a
        KL floor that a learned conditional prior cannot absorb.
        """
        p = self.cfg.n_pool_tokens
        if self.cfg.residual_mean and prior_mu is None:
            raise ValueError("residual_mean needs the prior mean")
        if self.cfg.posterior_encoder == "trainable":
            ids = np.asarray(post_ids)
            valid = ids != 0 if post_valid is None else post_valid
            x = backbone._embed(ids)
            b = ids.shape[0]
            pool = F.add(np.zeros((b,) + self.post_pool.shape, dtype=x.dtype), self.post_pool)
            x = F.concat([pool, x], axis=1)
            valid = np.concatenate([np.ones((b, p), dtype=bool), valid], axis=1)
            h = self.post_attn(x, valid)
        else:
            h = backbone.encode(post_ids, post_valid, pool=self.post_pool).values
        h = F.getitem(h, (slice(None), slice(0, p)))
        b, _, d = h.shape
        mu = self.mu_head(h)
        pre_sigma = self.sigma_head(h)
        if self.cfg.use_batchnorm:
            mu = F.reshape(self.mu_bn(F.reshape(mu, (b, p * d))), (b, p, d))
            pre_sigma = F.reshape(self.sigma_bn(F.reshape(pre_sigma, (b, p * d))), (b, p, d))
        sigma = F.add(F.softplus(pre_sigma), SIGMA_FLOOR)
        offset = mu
        if self.cfg.residual_mean:
            mu = F.add(prior_mu, offset)
        if not np.all(np.isfinite(mu.data)) or not np.all(np.isfinite(sigma.data)):
            raise NumericError("posterior parameters are not finite")
        return PosteriorOutput(mu, sigma, offset)

    # prefixes -------------------------------------------------------------------------

    def z_to_prefix(self, z: Tensor) -> AttentionPrefix:
        """Project ``z [n, n_pool, d]`` to per-layer key/value prefixes of length ``n_pool``."""
        cfg = self.bcfg
        if z.ndim != 3 or z.shape[1:] != (self.cfg.n_pool_tokens, cfg.d_model):
            raise ShapeError(f"z must be [n, {self.cfg.n_pool_tokens}, {cfg.d_model}], got {z.shape}")
        n, p = z.shape[0], z.shape[1]
        out = self.prefix_out(F.tanh(self.prefix_in(z)))
        out = F.reshape(out, (n, p, cfg.n_layers, 2, cfg.n_heads, cfg.d_k))
        out = F.transpose(out, (2, 3, 0, 4, 1, 5))  # [layers, 2, n, heads, p, d_k]
        keys = [F.getitem(out, (i, 0)) for i in range(cfg.n_layers)]
        values = [F.getitem(out, (i, 1)) for i in range(cfg.n_layers)]
        return AttentionPrefix(keys, values)

    def sample_prior(
        self,
        backbone: Backbone,
        src: list[int],
        tau: float,
        rng: np.random.Generator,
        n: int = 100,
        standard_prior: bool = False,
    ) -> LatentSample:
        """Draw ``n`` latents from N(mu_p(x), tau^2 I) and project them to prefixes.

        ``standard_prior`` replaces the prior mean with zero (the N(0, tau^2 I)
        ablation).
        """
        if not tau > 0:
            raise ValueError("tau must be positive")
        if n < 1:
            raise ValueError("n must be at least 1")
        with no_grad():
            ids = np.asarray([src])
            mu = self.prior_forward(backbone, ids).data
            if standard_prior:
                mu = np.zeros_like(mu)
            eps = rng.standard_normal((n,) + mu.shape[1:]).astype(mu.dtype)
            z = Tensor.wrap(mu + tau * eps)
            return LatentSample(z, "prior", self.z_to_prefix(z))

    def posterior_batch(self, pairs: list[tuple[list[int], list[int]]]) -> tuple[np.ndarray, np.ndarray]:
        return pad_batch([posterior_input(s, t, self.bcfg.max_len) for s, t in pairs])


def parameter_budget(backbone: Backbone, vpt: VPT) -> dict:
    """Trainable vs total parameter counts for phase 2."""
    backbone_total = backbone.num_parameters()
    vpt_total = vpt.num_parameters()
    trainable = backbone.num_parameters(trainable_only=True) + vpt.num_parameters(trainable_only=True)
    total = backbone_total + vpt_total
    return {
        "backbone_parameters": backbone_total,
        "vpt_parameters": vpt_total,
        "total_parameters": total,
        "trainable_parameters": trainable,
        "trainable_ratio": trainable / total,
        "ratio_to_full_finetune": trainable / backbone_total,
    }


def latent_log_density(z: np.ndarray, mu: np.ndarray, sigma: float) -> float:
    """Isotropic Gaussian log density, used by diagnostics."""
    k = z.size
    return float(-0.5 * (((z - mu) / sigma) ** 2).sum() - k * math.log(sigma) - 0.5 * k * math.log(2 * math.pi))
