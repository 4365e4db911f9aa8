"""Minimal dense tensor with reverse-mode automatic differentiation.

Every forward op records a backward closure and its parents on the output
tensor. :meth:`Tensor.backward` replays those closures in reverse
topological order. Gradients accumulate into leaf tensors that have
``requires_grad`` set; the caller is responsible for zeroing them between
steps (see :func:`zero_grad`).
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

_DEFAULT_DTYPE = np.float64
CHECK_FINITE = True

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NumericError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf from finite inputs."""


class GradientCheckError(RuntimeError):
    """Raised by :func:`fd_check` when a check cannot be carried out."""


def set_default_dtype(dtype) -> None:
    """Switch the float type used for new tensors (float64 or float32)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}; use float64 or float32")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """Dense float array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        if arr.dtype != _DEFAULT_DTYPE:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        if CHECK_FINITE and not np.all(np.isfinite(data)):
            if all(np.all(np.isfinite(p.data)) for p in parents):
                raise NumericError(f"non-finite result in forward op (shape {data.shape})")
        out = cls.__new__(cls)
        out.data = data
        out.name = None
        out.grad = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    # -- arithmetic -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    # -- reverse mode -------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` must be a scalar unless ``grad`` is given. Intermediate
        gradients are not retained. Calling backward twice on the same graph
        adds the gradients again.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise ValueError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b),
                        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._make(out, (a, b),
                        lambda g: (_unbroadcast(g / bd, ad.shape),
                                   _unbroadcast(-g * out / bd, bd.shape)))


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return Tensor._make(ad ** exponent, (a,),
                        lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),))


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def gelu(x: Tensor, approximate: bool = False) -> Tensor:
    """x * Phi(x). Exact erf form unless ``approximate`` selects the tanh variant."""
    xd = x.data
    if approximate:
        k = math.sqrt(2.0 / math.pi)
        inner = k * (xd + 0.044715 * xd ** 3)
        t = np.tanh(inner)
        out = 0.5 * xd * (1.0 + t)

        def backward(g):
            dinner = k * (1.0 + 3 * 0.044715 * xd ** 2)
            return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)
    else:
        cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
        out = xd * cdf

        def backward(g):
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
            return (g * (cdf + xd * pdf),)
    return Tensor._make(out, (x,), backward)


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    out = np.where(cond, a.data, b.data)

    def backward(g):
        return (_unbroadcast(np.where(cond, g, 0.0), sa),
                _unbroadcast(np.where(cond, 0.0, g), sb))
    return Tensor._make(out, (a, b), backward)


# -- reductions and shape ---------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return Tensor._make(np.asarray(out), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def take(a: Tensor, index) -> Tensor:
    """Basic or fancy indexing; repeated indices accumulate in backward."""
    shape = a.shape
    out = a.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)
    return Tensor._make(np.array(out, copy=True), (a,), backward)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        sl = [slice(None)] * g.ndim
        parts = []
        for i in range(len(tensors)):
            sl[axis] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)
    return Tensor._make(out, tensors, backward)


# -- linear algebra and normalisation -------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul batch dims not broadcastable: {a.shape} x {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))
    return Tensor._make(ad @ bd, (a, b), backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ValueError("softmax over an empty last dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    return Tensor._make(out, (x,), backward)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ValueError("log_softmax over an empty last dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)
    return Tensor._make(out, (x,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy needs (N, K) logits and N labels, got "
                         f"{logits.shape} and {labels.shape}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    logp = log_softmax_lastdim(logits)
    return -(logp[np.arange(labels.size), labels].mean())


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean of softplus(z) - y*z, computed stably."""
    y = np.asarray(targets, dtype=logits.data.dtype)
    if y.shape != logits.shape:
        raise ValueError(f"targets {y.shape} do not match logits {logits.shape}")
    z = logits.data
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    n = z.size
    return Tensor._make(np.asarray(loss.mean()), (logits,), lambda g: (g * (sig - y) / n,))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last dimension to zero mean / unit population variance."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be > 0, got {eps}")
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ValueError(f"gamma/beta must have shape ({n},), got {gamma.shape}, {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return (dx, (g * xhat).sum(axis=red), g.sum(axis=red))
    return Tensor._make(out, (x, gamma, beta), backward)


# -- gradient oracle ----------------------------------------------------------

def fd_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
             max_coords: Optional[int] = None, seed: int = 0,
             kink_tol: float = 1e-3) -> float:
    """Compare analytic gradients of ``f()`` with central finite differences.

    ``f`` takes no arguments and closes over ``params``; it must return the
    same scalar each time it is called with unchanged parameters.
    At most ``max_coords`` coordinates per parameter are sampled (all when
    None). Returns the max of |analytic - cd| / max(|analytic|, |cd|, 1e-12).

    Raises GradientCheckError when ``f`` is not deterministic, or when the
    one-sided slopes at a sampled coordinate disagree by more than
    ``kink_tol * max(1, |slope|)``, which marks a non-differentiable point
    (e.g. |w| at w=0) where the comparison is meaningless.
    """
    if step <= 0:
        raise ValueError(f"step must be > 0, got {step}")
    f0 = f().item()
    if f().item() != f0:
        raise GradientCheckError("f is not deterministic: two evaluations differ")

    zero_grad(params)
    f().backward()
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            fp = f().item()
            flat[c] = orig - step
            fm = f().item()
            flat[c] = orig
            fwd, bwd = (fp - f0) / step, (f0 - fm) / step
            if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
                raise GradientCheckError(
                    f"non-differentiable point in {p.name or 'parameter'}[{c}]: "
                    f"one-sided slopes {fwd:.6g} vs {bwd:.6g}")
            cd = (fp - fm) / (2 * step)
            an = ga.reshape(-1)[c]
            err = abs(an - cd) / max(abs(an), abs(cd), 1e-12)
            worst = max(worst, err)
    return worst
