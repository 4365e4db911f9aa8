"""AdamW / SGD, warmup + cosine schedule, per-depth lr decay and parameter EMA."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor

ALGORITHMS = ("adamw", "sgd")


@dataclass
class OptimConfig:
    algorithm: str = "adamw"
    peak_lr: float = 1e-4
    warmup_steps: int = 0
    total_steps: int = 1000
    min_lr: float = 0.0
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    momentum: float = 0.9
    stage_decay: Optional[float] = None
    ema_decay: Optional[float] = None
    grad_clip: Optional[float] = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be > 0")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.min_lr < 0 or self.min_lr > self.peak_lr:
            raise ValueError("need 0 <= min_lr <= peak_lr")
        if self.stage_decay is not None and not 0 < self.stage_decay <= 1:
            raise ValueError("stage_decay must be in (0, 1]")
        if self.ema_decay is not None and not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must be in [0, 1)")


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Linear ramp 0 -> peak over the warmup steps, then cosine decay to ``min_lr``.

    Steps past ``total_steps`` are clamped and return ``min_lr``.
    """
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step >= cfg.total_steps:
        return cfg.min_lr if cfg.total_steps > cfg.warmup_steps else cfg.peak_lr
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


def adamw_step(params: List[np.ndarray], grads: List[np.ndarray], state: Dict, lr: float,
               cfg: OptimConfig, names: Optional[Sequence[str]] = None,
               decay_mask: Optional[Sequence[bool]] = None,
               lr_scales: Optional[Sequence[float]] = None) -> None:
    """One in-place AdamW update with bias correction and decoupled weight decay.

    ``state`` holds ``t``, ``m`` and ``v``; an empty dict is initialised to zero moments.
    """
    names = names or [f"param{i}" for i in range(len(params))]
    if not state:
        state.update(t=0, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])
    if len(state["m"]) != len(params) or any(m.shape != p.shape for m, p in zip(state["m"], params)):
        raise ValueError("optimizer state does not match parameter shapes")
    state["t"] += 1
    t = state["t"]
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {names[i]}")
        m, v = state["m"][i], state["v"][i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step_lr = lr * (lr_scales[i] if lr_scales is not None else 1.0)
        if decay_mask is None or decay_mask[i]:
            p -= step_lr * cfg.weight_decay * p
        p -= step_lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def sgd_step(params: List[np.ndarray], grads: List[np.ndarray], state: Dict, lr: float,
             cfg: OptimConfig, names: Optional[Sequence[str]] = None,
             decay_mask: Optional[Sequence[bool]] = None,
             lr_scales: Optional[Sequence[float]] = None) -> None:
    """SGD with heavy-ball momentum; weight decay is added to the gradient."""
    names = names or [f"param{i}" for i in range(len(params))]
    if not state:
        state.update(t=0, m=[np.zeros_like(p) for p in params])
    state["t"] += 1
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {names[i]}")
        if decay_mask is None or decay_mask[i]:
            g = g + cfg.weight_decay * p
        buf = state["m"][i]
        buf *= cfg.momentum
        buf += g
        p -= lr * (lr_scales[i] if lr_scales is not None else 1.0) * buf


def stage_decay_multipliers(depths: Sequence[int], factor: float,
                            max_depth: Optional[int] = None) -> List[float]:
    """factor ** (max_depth - depth) per parameter; the deepest level gets 1."""
    if factor <= 0 or factor > 1:
        raise ValueError(f"stage decay factor must be in (0, 1], got {factor}")
    top = max(depths) if max_depth is None else max_depth
    return [factor ** (top - d) for d in depths]


def ema_update(ema: Sequence[np.ndarray], params: Sequence[np.ndarray], decay: float) -> None:
    """In place: ema <- decay * ema + (1 - decay) * params."""
    if not 0 <= decay < 1:
        raise ValueError(f"EMA decay must be in [0, 1), got {decay}")
    if len(ema) != len(params):
        raise ValueError("EMA and parameter lists differ in length")
    for e, p in zip(ema, params):
        if e.shape != p.shape:
            raise ValueError(f"EMA shape {e.shape} != parameter shape {p.shape}")
        e *= decay
        e += (1.0 - decay) * p


_BLOCK = re.compile(r"(?:^|\.)encoder\.blocks\.(\d+)\.")


def depth_index(name: str, encoder_depth: int) -> int:
    """Embedders and special tokens 0, encoder block k -> k + 1, everything after -> depth + 1."""
    dotted = f".{name}"
    if ".embed." in dotted or ".tokens." in dotted:
        return 0
    hit = _BLOCK.search(name)
    if hit:
        return int(hit.group(1)) + 1
    return encoder_depth + 1


def no_weight_decay(name: str, p: Tensor) -> bool:
    """Biases, norm parameters and learnable tokens are never decayed."""
    leaf = name.rsplit(".", 1)[-1]
    return p.ndim <= 1 or leaf in ("bias", "gamma", "beta") or ".tokens." in f".{name}"


def global_grad_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads))


class Optimizer:
    """Binds named parameters to an update rule, schedule, stage decay and optional EMA."""

    def __init__(self, named_params: Sequence[Tuple[str, Tensor]], cfg: OptimConfig,
                 encoder_depth: Optional[int] = None):
        self.cfg = cfg
        self.named = [(n, p) for n, p in named_params if p.requires_grad]
        self.names = [n for n, _ in self.named]
        self.decay_mask = [not no_weight_decay(n, p) for n, p in self.named]
        if cfg.stage_decay is not None and cfg.stage_decay != 1.0:
            if encoder_depth is None:
                raise ValueError("stage decay needs the encoder depth")
            depths = [depth_index(n, encoder_depth) for n in self.names]
            self.lr_scales = stage_decay_multipliers(depths, cfg.stage_decay, encoder_depth + 1)
        else:
            self.lr_scales = None
        self.state: Dict = {}
        self.step_count = 0
        self.ema: Optional[List[np.ndarray]] = None
        if cfg.ema_decay is not None:
            self.ema = [p.data.copy() for _, p in self.named]

    @property
    def params(self) -> List[Tensor]:
        return [p for _, p in self.named]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def current_lr(self) -> float:
        return lr_at(self.step_count, self.cfg)

    def step(self) -> float:
        """Apply one update using the gradients currently stored on the parameters."""
        lr = self.current_lr()
        data = [p.data for p in self.params]
        grads = [p.grad for p in self.params]
        if self.cfg.grad_clip is not None:
            norm = global_grad_norm(grads)
            if norm > self.cfg.grad_clip:
                grads = [g * (self.cfg.grad_clip / norm) for g in grads]
        rule = adamw_step if self.cfg.algorithm == "adamw" else sgd_step
        rule(data, grads, self.state, lr, self.cfg, self.names, self.decay_mask, self.lr_scales)
        if self.ema is not None:
            ema_update(self.ema, data, self.cfg.ema_decay)
        self.step_count += 1
        return lr

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for key in ("m", "v"):
            for name, arr in zip(self.names, self.state.get(key, [])):
                out[f"{key}/{name}"] = arr
        if self.ema is not None:
            for name, arr in zip(self.names, self.ema):
                out[f"ema/{name}"] = arr
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], t: int, step_count: int) -> None:
        self.step_count = step_count
        self.state = {}
        if t:
            keys = ("m", "v") if self.cfg.algorithm == "adamw" else ("m",)
            self.state["t"] = t
            for key in keys:
                self.state[key] = [np.array(arrays[f"{key}/{n}"], copy=True) for n in self.names]
        if self.ema is not None:
            self.ema = [np.array(arrays[f"ema/{n}"], copy=True) for n in self.names]
