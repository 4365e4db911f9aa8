"""Random token dropping, mask-token refill and two-modality sequence bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Module, parameter
from .vit import TokenSequence

MODALITY_1 = 0
MODALITY_2 = 1


@dataclass
class MaskSpec:
    """Drop decisions ``m`` (True = dropped), shape ``(L,)`` or ``(B, L)``."""

    m: np.ndarray
    rho: float
    rng_seed: Optional[int] = None

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=bool)

    @property
    def batched(self) -> np.ndarray:
        return np.atleast_2d(self.m)

    @property
    def num_dropped(self) -> np.ndarray:
        return self.batched.sum(axis=1)


def _check_rho(rho: float) -> None:
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"mask ratio must be in [0, 1], got {rho}")


def _draw(length: int, rho: float, rng: np.random.Generator, fixed_count: bool) -> np.ndarray:
    if fixed_count:
        k = int(round(rho * length))
        if rho > 0:
            k = max(k, 1)
        m = np.zeros(length, dtype=bool)
        m[rng.permutation(length)[:k]] = True
        return m
    m = rng.random(length) < rho
    if rho > 0 and length > 0 and not m.any():
        # the loss divides by the dropped count: resample once, then force one drop
        m = rng.random(length) < rho
        if not m.any():
            m[rng.integers(length)] = True
    return m


def sample_mask(length: int, rho: float, seed: int, fixed_count: bool = False) -> MaskSpec:
    """I.i.d. Bernoulli(rho) drops for one sequence, reproducible from ``seed``."""
    _check_rho(rho)
    rng = np.random.default_rng(seed)
    return MaskSpec(_draw(length, rho, rng, fixed_count), rho, seed)


def sample_masks(batch: int, length: int, rho: float, rng: np.random.Generator,
                 fixed_count: bool = False) -> MaskSpec:
    """One independent mask per sample, drawn in order from ``rng``."""
    _check_rho(rho)
    m = np.stack([_draw(length, rho, rng, fixed_count) for _ in range(batch)]) \
        if batch else np.zeros((0, length), dtype=bool)
    return MaskSpec(m, rho)


def _segment_tag(seq: TokenSequence) -> Optional[int]:
    if seq.modality is None:
        return None
    tags = np.unique(seq.modality)
    if len(tags) > 1:
        raise ValueError("expected a single-modality sequence")
    return int(tags[0]) if len(tags) else None


def _aligned_mask(mask: MaskSpec, seq_batch: int, length: int) -> np.ndarray:
    m = mask.batched
    if m.shape[0] == 1 and seq_batch > 1:
        m = np.broadcast_to(m, (seq_batch, m.shape[1]))
    if m.shape != (seq_batch, length):
        raise ValueError(f"mask shape {m.shape} does not match sequence ({seq_batch}, {length})")
    return m


def filter_visible(seq: TokenSequence, mask: MaskSpec) -> TokenSequence:
    """Keep tokens with m_i = False, in order, padded to the batch max with position -1."""
    m = _aligned_mask(mask, seq.batch, seq.length)
    keep = ~m & ~seq.pad
    counts = keep.sum(axis=1)
    n = int(counts.max()) if counts.size else 0
    idx = np.argsort(~keep, axis=1, kind="stable")[:, :n]
    valid = np.arange(n)[None, :] < counts[:, None]
    bidx = np.arange(seq.batch)[:, None]
    tokens = seq.tokens[bidx, idx]
    if not valid.all():
        tokens = tokens * valid[..., None].astype(tokens.data.dtype)
    positions = np.where(valid, seq.positions[bidx, idx], -1)
    tag = _segment_tag(seq)
    modality = None if tag is None else np.full(n, tag)
    return TokenSequence(tokens, positions, modality)


def refill(desc: TokenSequence, mask: MaskSpec, mask_token: Tensor,
           pos_table: np.ndarray) -> TokenSequence:
    """Full-length sequence: descriptors at visible slots, mask_token + p_i at dropped ones."""
    m = _aligned_mask(mask, desc.batch, mask.batched.shape[1])
    b, length = m.shape
    expected = length - m.sum(axis=1)
    if not np.array_equal(desc.lengths, expected):
        raise ValueError(f"descriptor counts {desc.lengths.tolist()} do not match visible "
                         f"counts {expected.tolist()}")
    if pos_table.shape[0] < length:
        raise ValueError(f"positional table has {pos_table.shape[0]} rows, need {length}")
    filler = mask_token + pos_table[:length]
    if desc.length == 0:
        tokens = filler + np.zeros((b, length, filler.shape[-1]))
    else:
        inv = np.zeros((b, length), dtype=np.int64)
        bb, jj = np.nonzero(~desc.pad)
        pos = desc.positions[bb, jj]
        if m[bb, pos].any():
            raise ValueError("descriptor positions overlap masked slots")
        inv[bb, pos] = jj
        gathered = desc.tokens[np.arange(b)[:, None], inv]
        tokens = ad.where(m[..., None], filler, gathered)
    positions = np.broadcast_to(np.arange(length), (b, length)).copy()
    tag = _segment_tag(desc)
    modality = None if tag is None else np.full(length, tag)
    return TokenSequence(tokens, positions, modality)


def join_modalities(seq1: TokenSequence, seq2: TokenSequence, mod1, mod2) -> TokenSequence:
    """Add modality tokens and concatenate as (modality 1, modality 2)."""
    if seq1.width != seq2.width:
        raise ValueError(f"modality widths differ: {seq1.width} vs {seq2.width}")
    if seq1.batch != seq2.batch:
        raise ValueError(f"batch sizes differ: {seq1.batch} vs {seq2.batch}")
    for tok in (mod1, mod2):
        if np.shape(tok.data if isinstance(tok, Tensor) else tok) != (seq1.width,):
            raise ValueError(f"modality token must have shape ({seq1.width},)")
    tokens = ad.concat([seq1.tokens + mod1, seq2.tokens + mod2], axis=1)
    positions = np.concatenate([seq1.positions, seq2.positions], axis=1)
    modality = np.concatenate([np.full(seq1.length, MODALITY_1), np.full(seq2.length, MODALITY_2)])
    return TokenSequence(tokens, positions, modality)


def split_modalities(joint: TokenSequence) -> Tuple[TokenSequence, TokenSequence]:
    """Undo the concatenation of :func:`join_modalities` using the per-token tags."""
    if joint.modality is None:
        raise ValueError("split_modalities needs modality tags")
    tags = joint.modality
    if np.any(np.diff(tags) < 0) or not np.isin(tags, (MODALITY_1, MODALITY_2)).all():
        raise ValueError("modality tags must be (modality 1 ..., modality 2 ...)")
    n1 = int((tags == MODALITY_1).sum())
    parts = []
    for sl, tag in ((slice(0, n1), MODALITY_1), (slice(n1, joint.length), MODALITY_2)):
        tokens = joint.tokens[:, sl]
        parts.append(TokenSequence(tokens, joint.positions[:, sl], np.full(tokens.shape[1], tag)))
    return parts[0], parts[1]


class SpecialTokens(Module):
    """Learnable mask and modality tokens of the encoder width.

    Unimodal models carry ``mask_uni``; two-modality models carry
    ``mask_1``, ``mask_2``, ``mod_1`` and ``mod_2``.
    """

    def __init__(self, width: int, rng: np.random.Generator, multimodal: bool = False,
                 std: float = 0.02):
        def tok(name):
            return parameter(rng.normal(0.0, std, size=width), name)

        if multimodal:
            self.mask_1 = tok("mask_1")
            self.mask_2 = tok("mask_2")
            self.mod_1 = tok("mod_1")
            self.mod_2 = tok("mod_2")
        else:
            self.mask_uni = tok("mask_uni")
