"""Finite-difference gradient cases for every differentiable primitive, plus one end-to-end VPT loss."""

import numpy as np

from vptlab.backbone.model import Backbone, BackboneConfig, MultiHeadAttention
from vptlab.numerics import functional as F
from vptlab.numerics.gradcheck import check_gradients
from vptlab.numerics.tensor import Parameter, Tensor, precision

TOL = 1e-4


def _p(rng, *shape, low=-1.0, high=1.0):
    return Parameter(rng.uniform(low, high, size=shape))


def _shape(rng, nd=2):
    return tuple(int(s) for s in rng.integers(1, 5, size=nd))


def _weights(rng, shape):
    # a fixed random projection turns any output into a scalar with a generic gradient
    return rng.standard_normal(shape)


def _scalar(out: Tensor, w: np.ndarray) -> Tensor:
    return F.sum(F.mul(out, w))


def case_unary(op, low=-1.0, high=1.0):
    def build(rng):
        a = _p(rng, *_shape(rng, 3), low=low, high=high)
        w = _weights(rng, a.shape)
        return (lambda: _scalar(op(a), w)), [a]

    return build


def case_binary(op, b_low=-1.0, b_high=1.0):
    def build(rng):
        shape = _shape(rng, 3)
        a = _p(rng, *shape)
        b = _p(rng, *shape[1:], low=b_low, high=b_high)  # broadcast along the first axis
        w = _weights(rng, shape)
        return (lambda: _scalar(op(a, b), w)), [a, b]

    return build


def build_matmul(rng):
    m, k, n = (int(v) for v in rng.integers(1, 6, size=3))
    a, b = _p(rng, 2, m, k), _p(rng, k, n)
    w = _weights(rng, (2, m, n))
    return (lambda: _scalar(F.matmul(a, b), w)), [a, b]


def build_reductions(rng):
    a = _p(rng, *_shape(rng, 3))
    w0 = _weights(rng, a.shape[1:])
    w1 = _weights(rng, a.shape[:1] + a.shape[2:])
    return (lambda: F.add(_scalar(F.sum(a, axis=0), w0), _scalar(F.mean(a, axis=1), w1))), [a]


def build_shape_ops(rng):
    a = _p(rng, 2, 3, 4)
    b = _p(rng, 2, 1, 4)
    w = _weights(rng, (4, 2, 2))

    def fn():
        c = F.concat([a, b], axis=1)  # [2, 4, 4]
        t = F.transpose(c, (2, 0, 1))  # [4, 2, 4]
        s = F.getitem(t, (slice(None), slice(None), slice(1, 3)))
        r = F.reshape(F.swapaxes(s, 1, 2), (4, 2, 2))
        return _scalar(r, w)

    return fn, [a, b]


def build_softmax(rng):
    a = _p(rng, *_shape(rng, 2), low=-3, high=3)
    w = _weights(rng, a.shape)
    return (lambda: F.add(_scalar(F.softmax(a), w), _scalar(F.log_softmax(a, axis=0), w))), [a]


def build_cross_entropy(rng):
    b, t, v = 2, int(rng.integers(2, 5)), 5
    logits = _p(rng, b, t, v, low=-2, high=2)
    targets = rng.integers(0, v, size=(b, t))
    targets[0, -1] = 0  # one padded position
    return (lambda: F.add(F.cross_entropy(logits, targets, pad_id=0), F.cross_entropy(logits, targets, reduction="sequence"))), [logits]


def build_embedding(rng):
    table = _p(rng, 6, 3)
    ids = rng.integers(0, 6, size=(2, 4))
    ids[0, 0] = ids[1, 1]  # a repeated id exercises the scatter-add
    w = _weights(rng, (2, 4, 3))
    return (lambda: _scalar(F.embedding(table, ids), w)), [table]


def build_layer_norm(rng):
    x = _p(rng, 3, 5)
    g, b = _p(rng, 5, low=0.5, high=1.5), _p(rng, 5)
    w = _weights(rng, x.shape)
    return (lambda: _scalar(F.layer_norm(x, g, b), w)), [x, g, b]


def build_batch_norm(rng):
    x = _p(rng, 6, 4)
    g, b = _p(rng, 4, low=0.5, high=1.5), _p(rng, 4)
    w = _weights(rng, x.shape)

    def fn():
        rm, rv = np.zeros(4), np.ones(4)  # fresh buffers keep fn deterministic
        train = F.batch_norm(x, g, b, rm, rv, training=True)
        ev = F.batch_norm(x, g, b, np.full(4, 0.1), np.full(4, 2.0), training=False)
        return F.add(_scalar(train, w), _scalar(ev, w))

    return fn, [x, g, b]


def build_dropout(rng):
    x = _p(rng, 4, 5)
    w = _weights(rng, x.shape)
    seed = int(rng.integers(1 << 30))
    return (lambda: _scalar(F.dropout(x, 0.3, np.random.default_rng(seed), True), w)), [x]


def build_gaussian_kl(rng):
    mu = _p(rng, 3, 4)
    sigma = _p(rng, 3, 4, low=0.3, high=2.0)
    mu_p = rng.standard_normal((3, 4))
    return (lambda: F.sum(F.gaussian_kl(mu, sigma, mu_p, 1.5))), [mu, sigma]


def build_attention_block(rng):
    """A composite transformer piece: multi-head attention with a key/value prefix, plus residual and layer norm."""
    d, heads = 8, 2
    attn = MultiHeadAttention(d, heads, np.random.default_rng(int(rng.integers(1 << 30))))
    x = _p(rng, 2, 3, d)
    pk, pv = _p(rng, 2, heads, 2, d // heads), _p(rng, 2, heads, 2, d // heads)
    mask = np.tril(np.ones((3, 3), dtype=bool))[None, None]
    w = _weights(rng, (2, 3, d))
    g, b = Parameter(np.ones(d)), Parameter(np.zeros(d))
    params = [x, pk, pv, *attn.parameters()]

    def fn():
        h = F.layer_norm(x, g, b)
        return _scalar(F.add(x, attn(h, h, mask, prefix=(pk, pv))), w)

    return fn, params


def build_vpt_loss(rng):
    """Negative ELBO of the latent prefix model on a tiny frozen backbone."""
    from vptlab.vpt.model import VPT, VPTConfig
    from vptlab.vpt.train import vpt_loss

    seed = int(rng.integers(1 << 30))
    cfg = BackboneConfig(vocab_size=10, d_model=8, n_layers=1, n_heads=2, d_ff=8, max_len=16, dropout_rate=0.0)
    backbone = Backbone(cfg, seed=seed).eval()
    backbone.freeze()
    vpt = VPT(cfg, VPTConfig(), seed=seed + 1)
    vpt.train()
    pairs = []
    for _ in range(3):
        src = [1] + [int(t) for t in rng.integers(5, 10, size=int(rng.integers(2, 5)))] + [2]
        tgt = [1] + [int(t) for t in rng.integers(5, 10, size=int(rng.integers(1, 4)))] + [2]
        pairs.append((src, tgt))

    def fn():
        # the same noise on every call keeps the loss a deterministic function of the parameters
        return vpt_loss(backbone, vpt, pairs, 0.7, np.random.default_rng(seed)).total

    return fn, vpt.parameters()


CASES = {
    "add": case_binary(F.add),
    "sub": case_binary(F.sub),
    "mul": case_binary(F.mul),
    "div": case_binary(F.div, 0.5, 2.0),
    "scale": case_unary(lambda a: F.scale(a, -1.7)),
    "exp": case_unary(F.exp),
    "log": case_unary(F.log, 0.2, 2.0),
    "square": case_unary(F.square),
    "tanh": case_unary(F.tanh),
    "relu": case_unary(F.relu, 0.05, 1.0),  # away from the kink
    "sigmoid": case_unary(F.sigmoid),
    "softplus": case_unary(F.softplus, -3.0, 3.0),
    "matmul": build_matmul,
    "sum_mean": build_reductions,
    "concat_slice_reshape_transpose": build_shape_ops,
    "softmax": build_softmax,
    "cross_entropy": build_cross_entropy,
    "embedding": build_embedding,
    "layer_norm": build_layer_norm,
    "batch_norm": build_batch_norm,
    "dropout": build_dropout,
    "gaussian_kl": build_gaussian_kl,
    "attention_block": build_attention_block,
    "vpt_loss": build_vpt_loss,
}


def run_case(name: str, seeds: int = 20) -> float:
    """Worst relative error for ``name`` over ``seeds`` random instances, in 64-bit mode."""
    worst = 0.0
    with precision(np.float64):
        for seed in range(seeds):
            rng = np.random.default_rng(1000 + seed)
            fn, params = CASES[name](rng)
            max_coords = 12 if name in ("attention_block", "vpt_loss") else None
            # the end-to-end loss crosses ReLU kinks in the frozen encoder, so it needs a narrow step
            h = 1e-6 if name == "vpt_loss" else 1e-3
            worst = max(worst, check_gradients(fn, params, h=h, max_coords=max_coords, rng=rng))
    return worst
