"""Vision transformer pieces: patch grids, token sequences, encoder and decoder blocks."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .nn import LayerNorm, Linear, Module, parameter

# additive attention bias for padded keys; exp() of it underflows to exactly 0
_PAD_BIAS = -1e9


@dataclass(frozen=True)
class PatchGrid:
    image_height: int
    image_width: int
    patch_size: int
    channels: int = 1

    def __post_init__(self):
        h, w, p = self.image_height, self.image_width, self.patch_size
        if p <= 0 or h % p or w % p:
            raise ValueError(f"image size H={h}, W={w} is not divisible by patch size p={p}")

    @property
    def grid(self) -> tuple:
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    @property
    def num_patches(self) -> int:
        rows, cols = self.grid
        return rows * cols

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class VitConfig:
    depth: int = 2
    heads: int = 4
    width: int = 64
    mlp_ratio: float = 4.0
    patch_size: int = 8
    decoder_depth: int = 2
    decoder_width: int = 128
    decoder_heads: int = 4
    channels: int = 1
    ln_eps: float = 1e-6
    # "1d" raster index; the only scheme implemented
    pos_embedding: str = "1d"

    def __post_init__(self):
        for name in ("depth", "heads", "width", "patch_size", "decoder_depth",
                     "decoder_width", "decoder_heads", "channels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.depth < 1 or self.mlp_ratio <= 0:
            raise ValueError("depth and mlp_ratio must be positive")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.decoder_width % self.decoder_heads:
            raise ValueError(f"decoder_width {self.decoder_width} not divisible by "
                             f"decoder_heads {self.decoder_heads}")
        if self.width % 2:
            raise ValueError("width must be even for sinusoidal positions")
        if self.pos_embedding != "1d":
            raise ValueError(f"unsupported pos_embedding {self.pos_embedding!r}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "VitConfig":
        presets = {
            "tiny": dict(depth=2, heads=4, width=64),
            "vit_b": dict(depth=12, heads=12, width=768, patch_size=16),
            "vit_l": dict(depth=24, heads=16, width=1024, patch_size=16),
        }
        if name not in presets:
            raise KeyError(f"unknown preset {name!r}; choose from {sorted(presets)}")
        return cls(**{**presets[name], **overrides})


@dataclass
class TokenSequence:
    """Batched tokens ``(B, N, D)`` with original patch indices.

    ``positions[b, j]`` is the raster index of token j in sample b, or -1
    for padding. ``modality`` tags each column (same for every sample).
    """

    tokens: Tensor
    positions: np.ndarray
    modality: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if self.tokens.ndim != 3:
            raise ValueError(f"tokens must be (B, N, D), got {self.tokens.shape}")
        if self.positions.shape != self.tokens.shape[:2]:
            raise ValueError(f"positions shape {self.positions.shape} does not match "
                             f"tokens {self.tokens.shape[:2]}")
        if self.modality is not None:
            self.modality = np.asarray(self.modality, dtype=np.int64)
            if self.modality.shape != (self.tokens.shape[1],):
                raise ValueError("modality needs one tag per token column")

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    @property
    def width(self) -> int:
        return self.tokens.shape[2]

    @property
    def pad(self) -> np.ndarray:
        return self.positions < 0

    @property
    def lengths(self) -> np.ndarray:
        return (~self.pad).sum(axis=1)

    def with_tokens(self, tokens: Tensor) -> "TokenSequence":
        return replace(self, tokens=tokens)


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """``(C, H, W)`` or ``(B, C, H, W)`` -> ``(L, p*p*C)`` / ``(B, L, p*p*C)``.

    Patches are in row-major grid order; each vector is flattened (C, p, p).
    """
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4:
        raise ValueError(f"expected (C, H, W) or (B, C, H, W), got {images.shape}")
    b, c, h, w = images.shape
    grid = PatchGrid(h, w, p, c)
    rows, cols = grid.grid
    x = images.reshape(b, c, rows, p, cols, p).transpose(0, 2, 4, 1, 3, 5)
    x = x.reshape(b, rows * cols, c * p * p)
    return x[0] if single else x


def unpatchify(patches, grid: PatchGrid) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    patches = np.asarray(patches.data if isinstance(patches, Tensor) else patches)
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    b, n, d = patches.shape
    if n != grid.num_patches or d != grid.patch_dim:
        raise ValueError(f"got {n} patches of length {d}; grid expects "
                         f"{grid.num_patches} of length {grid.patch_dim}")
    rows, cols = grid.grid
    p, c = grid.patch_size, grid.channels
    x = patches.reshape(b, rows, cols, c, p, p).transpose(0, 3, 1, 4, 2, 5)
    x = x.reshape(b, c, rows * p, cols * p)
    return x[0] if single else x


@lru_cache(maxsize=64)
def _sinusoid(length: int, width: int) -> np.ndarray:
    i = np.arange(length, dtype=np.float64)[:, None]
    k = np.arange(width // 2, dtype=np.float64)[None, :]
    angle = i / np.power(10000.0, 2.0 * k / width)
    table = np.empty((length, width))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    table.flags.writeable = False
    return table


def sinusoidal_pos(length: int, width: int) -> np.ndarray:
    """Fixed table with p[i, 2k] = sin(i / 10000^(2k/D)), p[i, 2k+1] = cos(...)."""
    if width % 2:
        raise ValueError(f"sinusoidal positions need an even width, got {width}")
    if length < 0:
        raise ValueError("length must be non-negative")
    return _sinusoid(int(length), int(width))


def embed_tokens(patches, embedder: Linear, pos_table: np.ndarray) -> TokenSequence:
    """Token i = E(x_i) + p_i for a batch of patch vectors."""
    x = patches if isinstance(patches, Tensor) else Tensor(patches)
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    b, n, d = x.shape
    if d != embedder.in_features:
        raise ValueError(f"patch length {d} does not match embedder input {embedder.in_features}")
    if pos_table.shape[0] < n or pos_table.shape[1] != embedder.out_features:
        raise ValueError(f"positional table {pos_table.shape} too small for "
                         f"{n} tokens of width {embedder.out_features}")
    tokens = embedder(x) + pos_table[:n]
    positions = np.broadcast_to(np.arange(n), (b, n)).copy()
    return TokenSequence(tokens, positions)


class Attention(Module):
    """Multi-head self-attention. Keys carry no bias: it would add the same
    amount to every logit of a query and cancel in the softmax."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        self.qkv = Linear(width, 3 * width, rng, bias=False)
        self.q_bias = parameter(np.zeros(width), "q_bias")
        self.v_bias = parameter(np.zeros(width), "v_bias")
        self.proj = Linear(width, width, rng)
        self._heads = heads

    def forward(self, x: Tensor, pad: Optional[np.ndarray] = None) -> Tensor:
        b, n, d = x.shape
        h = self._heads
        dh = d // h
        bias = ad.concat([self.q_bias, Tensor(np.zeros_like(self.q_bias.data)), self.v_bias])
        qkv = (self.qkv(x) + bias).reshape(b, n, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
        if pad is not None and pad.any():
            scores = scores + np.where(pad, _PAD_BIAS, 0.0)[:, None, None, :]
        attn = ad.softmax_lastdim(scores)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.proj(out)


class Mlp(Module):
    def __init__(self, width: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(width, hidden, rng)
        self.fc2 = Linear(hidden, width, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, width: int, heads: int, mlp_ratio: float, rng: np.random.Generator,
                 eps: float = 1e-6):
        self.norm1 = LayerNorm(width, eps)
        self.attn = Attention(width, heads, rng)
        self.norm2 = LayerNorm(width, eps)
        self.mlp = Mlp(width, int(round(width * mlp_ratio)), rng)

    def forward(self, x: Tensor, pad: Optional[np.ndarray] = None) -> Tensor:
        x = x + self.attn(self.norm1(x), pad)
        return x + self.mlp(self.norm2(x))


class Transformer(Module):
    """Stack of blocks plus a final layer norm; length in == length out."""

    def __init__(self, depth: int, width: int, heads: int, mlp_ratio: float,
                 rng: np.random.Generator, eps: float = 1e-6, label: str = "encoder"):
        self.blocks: List[Block] = [Block(width, heads, mlp_ratio, rng, eps) for _ in range(depth)]
        self.norm = LayerNorm(width, eps)
        self._label = label

    @property
    def width(self) -> int:
        return self.norm.gamma.shape[0]

    def forward(self, x: Tensor, pad: Optional[np.ndarray] = None) -> Tensor:
        if x.shape[1] == 0:
            return x
        for i, blk in enumerate(self.blocks):
            try:
                x = blk(x, pad)
            except NumericError as exc:
                raise NumericError(f"non-finite activation in {self._label} block {i}") from exc
            if not np.all(np.isfinite(x.data)):
                raise NumericError(f"non-finite activation in {self._label} block {i}")
        return self.norm(x)


def encode(encoder: Transformer, seq: TokenSequence) -> TokenSequence:
    """Run the encoder over a (possibly padded) sequence; positions and tags carry over."""
    if seq.width != encoder.width:
        raise ValueError(f"token width {seq.width} != encoder width {encoder.width}")
    pad = seq.pad
    out = encoder(seq.tokens, pad if pad.any() else None)
    return seq.with_tokens(out)
