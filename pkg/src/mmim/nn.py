"""Parameter containers and the basic layers shared by encoder, decoder and heads."""

from __future__ import annotations

import hashlib
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .autodiff import Tensor, get_default_dtype, layer_norm


class Module:
    """Base class that discovers parameters and submodules from attributes.

    Attribute order defines parameter order, so two models built from the
    same config enumerate parameters identically.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _named(value, f"{prefix}{key}")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)
            p.grad = np.zeros_like(p.data) if p.requires_grad else None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = np.zeros_like(p.data) if flag else None
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _named(value, name: str):
    if isinstance(value, Tensor):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _named(item, f"{name}.{i}")


def parameter(data, name: str = "param") -> Tensor:
    return Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True, name=name)


def digest(params) -> str:
    """SHA-256 over parameter names, shapes and raw bytes, in order."""
    h = hashlib.sha256()
    for name, p in params:
        h.update(name.encode())
        h.update(str(p.data.shape).encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    """x @ weight + bias over the last dim; leading dims are flattened for one GEMM."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[0]:
        raise ValueError(f"linear width mismatch: input {xd.shape} vs weight {wd.shape}")
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, wd.shape[0])
    out = x2 @ wd
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, wd.shape[1])

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        grads = ((g2 @ wd.T).reshape(xd.shape), x2.T @ g2)
        return grads if bias is None else grads + (g2.sum(axis=0),)
    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 init: str = "xavier", bias: bool = True):
        if init == "xavier":
            bound = np.sqrt(6.0 / (in_features + out_features))
            w = rng.uniform(-bound, bound, size=(in_features, out_features))
        elif init == "zeros":
            w = np.zeros((in_features, out_features))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = parameter(w, "weight")
        self.bias = parameter(np.zeros(out_features), "bias") if bias else None

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-6):
        if eps <= 0:
            raise ValueError(f"layer norm eps must be > 0, got {eps}")
        self.gamma = parameter(np.ones(width), "gamma")
        self.beta = parameter(np.zeros(width), "beta")
        self._eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self._eps)
