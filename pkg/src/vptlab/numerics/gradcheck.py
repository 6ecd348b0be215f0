"""Central finite-difference gradient checks (run in float64)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from vptlab.numerics.tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error scaled by the larger of the two gradient magnitudes."""
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)


def numeric_grad(
    fn: Callable[[], Tensor],
    param: Tensor,
    h: float = 1e-3,
    coords: Sequence[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. ``param``.

    When ``coords`` is given only those entries are perturbed; the rest of the
    returned array is zero.
    """
    grad = np.zeros_like(param.data, dtype=np.float64)
    it = coords if coords is not None else list(np.ndindex(*param.shape))
    for idx in it:
        old = param.data[idx]
        param.data[idx] = old + h
        up = float(fn().data)
        param.data[idx] = old - h
        down = float(fn().data)
        param.data[idx] = old
        grad[idx] = (up - down) / (2.0 * h)
    return grad


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-3,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Relative error between the analytic and numeric gradient over all ``params`` jointly.

    The error is taken over the concatenated gradient vector, so a parameter
    whose true gradient is exactly zero (a bias feeding batch norm, say) is
    judged against the scale of the whole gradient rather than its own.

    ``fn`` must rebuild the graph on every call and be deterministic. With
    ``max_coords`` each parameter is spot-checked on that many random entries.
    """
    for p in params:
        p.grad = None
    out = fn()
    out.backward()
    analytic_all, numeric_all = [], []
    for p in params:
        analytic = np.zeros_like(p.data, dtype=np.float64) if p.grad is None else p.grad.astype(np.float64)
        coords = None
        if max_coords is not None and p.size > max_coords:
            rng = rng or np.random.default_rng(0)
            flat = rng.choice(p.size, size=max_coords, replace=False)
            coords = [np.unravel_index(i, p.shape) for i in flat]
            mask = np.zeros(p.shape, dtype=bool)
            for c in coords:
                mask[c] = True
            analytic = np.where(mask, analytic, 0.0)
        analytic_all.append(analytic.ravel())
        numeric_all.append(numeric_grad(fn, p, h=h, coords=coords).ravel())
    return relative_error(np.concatenate(analytic_all), np.concatenate(numeric_all))
