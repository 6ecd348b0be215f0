"""Minimal module system: parameter registration, train/eval mode, freezing."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from vptlab.numerics import functional as F
from vptlab.numerics.tensor import Parameter, Tensor, get_dtype


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Module:
    """Base class. Parameters, buffers and submodules are discovered from attributes."""

    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield f"{prefix}{name}", getattr(self, name)
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.size for p in self.parameters() if p.requires_grad or not trainable_only)

    def to(self, dtype) -> "Module":
        """Cast every parameter and buffer in place (used for float64 checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for name in getattr(m, "_buffers", ()):
                setattr(m, name, getattr(m, name).astype(dtype))
            for value in vars(m).values():
                if isinstance(value, Tensor) and not isinstance(value, Parameter):
                    value.data = value.data.astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = [k for k in params if k not in state]
        if missing:
            raise KeyError(f"missing tensors in state: {missing[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()
        owners = {}
        for m_name, m in self._named_modules():
            for b in getattr(m, "_buffers", ()):
                owners[f"{m_name}{b}"] = (m, b)
        for key, (m, b) in owners.items():
            if key in state:
                setattr(m, b, np.asarray(state[key]).astype(getattr(m, b).dtype).copy())

    def _named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value._named_modules(f"{prefix}{name}.")

    def fingerprint(self) -> str:
        """SHA-256 over all parameter bytes in registration order."""
        import hashlib

        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, init_scale: float = 1.0):
        self.weight = Parameter(glorot_uniform(rng, d_in, d_out) * init_scale, dtype=get_dtype())
        self.bias = Parameter(np.zeros(d_out), dtype=get_dtype()) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = F.matmul(x, self.weight)
        return F.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d), dtype=get_dtype())
        self.beta = Parameter(np.zeros(d), dtype=get_dtype())
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator):
        self.weight = Parameter(glorot_uniform(rng, n, d), dtype=get_dtype())

    def __call__(self, ids) -> Tensor:
        return F.embedding(self.weight, ids)


class BatchNorm(Module):
    """Feature-wise batch norm over all leading axes.

    ``fixed_gamma`` replaces the learnable scale with a constant, which pins the
    batch standard deviation of the output.
    """

    _buffers = ("running_mean", "running_var")

    def __init__(self, d: int, fixed_gamma: float | None = None, momentum: float = 0.1, eps: float = 1e-5):
        dtype = get_dtype()
        if fixed_gamma is None:
            self.gamma = Parameter(np.ones(d), dtype=dtype)
        else:
            self.gamma = Tensor(np.full(d, fixed_gamma), dtype=dtype)
        self.beta = Parameter(np.zeros(d), dtype=dtype)
        self.running_mean = np.zeros(d, dtype=dtype)
        self.running_var = np.ones(d, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )
