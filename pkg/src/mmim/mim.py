"""Masked reconstruction: models, losses and forward passes for one or two modalities."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .masking import (MODALITY_1, MODALITY_2, MaskSpec, SpecialTokens, filter_visible,
                      join_modalities, refill, sample_masks, split_modalities)
from .nn import Linear, Module
from .vit import (PatchGrid, TokenSequence, Transformer, VitConfig, embed_tokens, encode,
                  patchify, sinusoidal_pos, unpatchify)

DECODER_MODES = ("unimodal", "joint", "separate")


@dataclass
class MimConfig:
    vit: VitConfig = field(default_factory=VitConfig)
    decoder_mode: str = "unimodal"
    modalities: Tuple[str, ...] = ("oct",)
    image_sizes: Tuple[Tuple[int, int], ...] = ((32, 32),)
    norm_target: bool = False

    def __post_init__(self):
        if isinstance(self.vit, dict):
            self.vit = VitConfig(**self.vit)
        self.modalities = tuple(self.modalities)
        self.image_sizes = tuple(tuple(int(v) for v in s) for s in self.image_sizes)
        if self.decoder_mode not in DECODER_MODES:
            raise ValueError(f"decoder_mode must be one of {DECODER_MODES}, got {self.decoder_mode!r}")
        n = 1 if self.decoder_mode == "unimodal" else 2
        if len(self.modalities) != n:
            raise ValueError(f"decoder_mode={self.decoder_mode} needs {n} modalities, "
                             f"got {list(self.modalities)}")
        if len(self.image_sizes) != n:
            raise ValueError(f"need {n} image sizes, got {len(self.image_sizes)}")
        for h, w in self.image_sizes:
            PatchGrid(h, w, self.vit.patch_size, self.vit.channels)

    @property
    def multimodal(self) -> bool:
        return self.decoder_mode != "unimodal"

    def grid(self, k: int = 0) -> PatchGrid:
        h, w = self.image_sizes[k]
        return PatchGrid(h, w, self.vit.patch_size, self.vit.channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        d["image_sizes"] = [list(s) for s in self.image_sizes]
        return d


class Decoder(Module):
    """Width adapter, transformer blocks, and one pixel head per modality it serves."""

    def __init__(self, cfg: VitConfig, patch_dims: Sequence[int], rng: np.random.Generator):
        self.adapter = Linear(cfg.width, cfg.decoder_width, rng)
        self.body = Transformer(cfg.decoder_depth, cfg.decoder_width, cfg.decoder_heads,
                                cfg.mlp_ratio, rng, cfg.ln_eps, label="decoder")
        self.heads = [Linear(cfg.decoder_width, d, rng) for d in patch_dims]

    def hidden(self, tokens: Tensor) -> Tensor:
        return self.body(self.adapter(tokens))


class MimModel(Module):
    """Patch embedder(s), encoder, special tokens and decoder(s)."""

    def __init__(self, config: MimConfig, seed: int = 0):
        self.config = config
        cfg = config.vit
        rng = np.random.default_rng(seed)
        dims = [config.grid(k).patch_dim for k in range(len(config.modalities))]
        self.embed = [Linear(d, cfg.width, rng) for d in dims]
        self.tokens = SpecialTokens(cfg.width, rng, multimodal=config.multimodal)
        self.encoder = Transformer(cfg.depth, cfg.width, cfg.heads, cfg.mlp_ratio, rng, cfg.ln_eps)
        if config.decoder_mode == "separate":
            self.decoders = [Decoder(cfg, [d], rng) for d in dims]
        else:
            self.decoders = [Decoder(cfg, dims, rng)]

    def backbone_parameters(self) -> List[Tuple[str, Tensor]]:
        """Embedders, special tokens and encoder; what downstream tasks keep."""
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("decoders.")]

    def pos_table(self, k: int) -> np.ndarray:
        return sinusoidal_pos(self.config.grid(k).num_patches, self.config.vit.width)

    def embed_modality(self, images: np.ndarray, k: int) -> Tuple[np.ndarray, TokenSequence]:
        grid = self.config.grid(k)
        images = _as_batch(images)
        if images.shape[1:] != (grid.channels, grid.image_height, grid.image_width):
            raise ValueError(f"{self.config.modalities[k]} images must be "
                             f"{(grid.channels, grid.image_height, grid.image_width)}, "
                             f"got {images.shape[1:]}")
        x = patchify(images, grid.patch_size)
        seq = embed_tokens(x, self.embed[k], self.pos_table(k))
        if self.config.multimodal:
            seq.modality = np.full(seq.length, k)
        return x, seq


@dataclass
class StepOutput:
    loss: Tensor
    losses: List[Tensor]
    predictions: List[Tensor]
    masks: List[MaskSpec]
    targets: List[np.ndarray]
    reconstructions: List[np.ndarray]

    @property
    def loss_values(self) -> List[float]:
        return [l.item() for l in self.losses]


def _as_batch(images) -> np.ndarray:
    images = np.asarray(images, dtype=ad.get_default_dtype())
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4:
        raise ValueError(f"images must be (C, H, W) or (B, C, H, W), got {images.shape}")
    return images


def loss_unimodal(x, x_hat: Tensor, m) -> Tensor:
    """(1 / sum m_i) * sum_i m_i * ||x_i - x_hat_i||^2, averaged over the batch.

    ``x`` and ``x_hat`` are ``(L, P)`` or ``(B, L, P)``; ``m`` is a
    :class:`MaskSpec` or boolean array with one entry per patch.
    """
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    x_hat = x_hat if isinstance(x_hat, Tensor) else Tensor(x_hat)
    m = m.m if isinstance(m, MaskSpec) else np.asarray(m, dtype=bool)
    if x.shape != x_hat.shape:
        raise ValueError(f"target shape {x.shape} != prediction shape {x_hat.shape}")
    if x.ndim == 2:
        x, x_hat, m = x[None], x_hat.reshape(1, *x_hat.shape), np.atleast_2d(m)
    if m.shape != x.shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match patches {x.shape[:2]}")
    count = m.sum(axis=1)
    if np.any(count == 0):
        raise ValueError("loss needs at least one dropped patch per sample")
    weights = m / count[:, None] / m.shape[0]
    diff = x_hat - x
    sq = (diff * diff).sum(axis=-1)
    return (sq * weights).sum()


def _targets(x: np.ndarray, norm: bool) -> np.ndarray:
    if not norm:
        return x
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-6)


def _assemble(model: MimModel, k: int, x: np.ndarray, pred: Tensor, m: np.ndarray,
              paste_visible: bool) -> np.ndarray:
    p = pred.data
    if model.config.norm_target:
        mu = x.mean(axis=-1, keepdims=True)
        sd = np.sqrt(x.var(axis=-1, keepdims=True) + 1e-6)
        p = p * sd + mu
    if paste_visible:
        p = np.where(m[..., None], p, x)
    return unpatchify(p, model.config.grid(k))


def _loss_mask(m: np.ndarray, loss_on_all: Optional[bool], rho: float) -> np.ndarray:
    if loss_on_all is None:
        loss_on_all = rho == 0
    return np.ones_like(m) if loss_on_all else m


def forward_unimodal(model: MimModel, images, rho: float, seed: Optional[int] = None,
                     rng: Optional[np.random.Generator] = None,
                     loss_on_all: Optional[bool] = None, fixed_count: bool = False,
                     paste_visible: bool = True) -> StepOutput:
    """patchify -> embed -> mask -> encode visible -> refill -> decode -> masked loss.

    ``rho == 0`` is a test mode: nothing is dropped and the loss covers every
    patch (override with ``loss_on_all``). Reconstructions show original
    pixels at visible slots unless ``paste_visible`` is False.
    """
    if model.config.multimodal:
        raise ValueError("forward_unimodal needs a model with decoder_mode='unimodal'")
    rng = rng if rng is not None else np.random.default_rng(seed)
    x, seq = model.embed_modality(images, 0)
    mask = sample_masks(seq.batch, seq.length, rho, rng, fixed_count)
    desc = encode(model.encoder, filter_visible(seq, mask))
    full = refill(desc, mask, model.tokens.mask_uni, model.pos_table(0))
    dec = model.decoders[0]
    pred = dec.heads[0](dec.hidden(full.tokens))
    target = _targets(x, model.config.norm_target)
    loss = loss_unimodal(target, pred, _loss_mask(mask.m, loss_on_all, rho))
    recon = _assemble(model, 0, x, pred, mask.m, paste_visible and rho > 0)
    return StepOutput(loss, [loss], [pred], [mask], [x], [recon])


def forward_multimodal(model: MimModel, image1, image2, rho1: float, rho2: float,
                       seed: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                       loss_on_all: Optional[bool] = None, fixed_count: bool = False,
                       paste_visible: bool = True) -> StepOutput:
    """Joint encoding of both visible sets; total loss is the sum of the two masked losses."""
    if not model.config.multimodal:
        raise ValueError("forward_multimodal needs decoder_mode 'joint' or 'separate'")
    rng = rng if rng is not None else np.random.default_rng(seed)
    x1, seq1 = model.embed_modality(image1, 0)
    x2, seq2 = model.embed_modality(image2, 1)
    if seq1.batch != seq2.batch:
        raise ValueError(f"paired batches differ in size: {seq1.batch} vs {seq2.batch}")
    m1 = sample_masks(seq1.batch, seq1.length, rho1, rng, fixed_count)
    m2 = sample_masks(seq2.batch, seq2.length, rho2, rng, fixed_count)
    tok = model.tokens
    joint = join_modalities(filter_visible(seq1, m1), filter_visible(seq2, m2), tok.mod_1, tok.mod_2)
    d1, d2 = split_modalities(encode(model.encoder, joint))
    full1 = refill(d1, m1, tok.mask_1, model.pos_table(0))
    full2 = refill(d2, m2, tok.mask_2, model.pos_table(1))

    if model.config.decoder_mode == "joint":
        dec = model.decoders[0]
        h = dec.hidden(ad.concat([full1.tokens, full2.tokens], axis=1))
        n1 = full1.length
        preds = [dec.heads[0](h[:, :n1]), dec.heads[1](h[:, n1:])]
    else:
        preds = [dec.heads[0](dec.hidden(full.tokens))
                 for dec, full in zip(model.decoders, (full1, full2))]

    norm = model.config.norm_target
    losses = [loss_unimodal(_targets(x, norm), p, _loss_mask(m.m, loss_on_all, r))
              for x, p, m, r in ((x1, preds[0], m1, rho1), (x2, preds[1], m2, rho2))]
    recons = [_assemble(model, k, x, p, m.m, paste_visible and r > 0)
              for k, (x, p, m, r) in enumerate(((x1, preds[0], m1, rho1), (x2, preds[1], m2, rho2)))]
    return StepOutput(losses[0] + losses[1], losses, preds, [m1, m2], [x1, x2], recons)


def forward(model: MimModel, images: Sequence, rhos: Sequence[float], **kwargs) -> StepOutput:
    """Dispatch on the model's decoder mode; ``images``/``rhos`` hold one entry per modality."""
    if model.config.multimodal:
        return forward_multimodal(model, images[0], images[1], rhos[0], rhos[1], **kwargs)
    return forward_unimodal(model, images[0], rhos[0], **kwargs)


def encode_features(model: MimModel, images: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
    """Encode full, unmasked sequences; returns ``(B, L_k, D)`` descriptors per present modality.

    With a two-modality model and only one modality given, only that
    modality's tokens (plus its modality token) are encoded.
    """
    present = [k for k, name in enumerate(model.config.modalities) if images.get(name) is not None]
    unknown = set(images) - set(model.config.modalities)
    if unknown:
        raise ValueError(f"model has no modality {sorted(unknown)}; it knows {model.config.modalities}")
    if not present:
        raise ValueError("encode_features needs at least one modality")
    seqs = {}
    for k in present:
        _, seq = model.embed_modality(images[model.config.modalities[k]], k)
        seqs[k] = seq
    if not model.config.multimodal:
        out = encode(model.encoder, seqs[0])
        return {model.config.modalities[0]: out.tokens}

    tok = model.tokens
    mods = {MODALITY_1: tok.mod_1, MODALITY_2: tok.mod_2}
    if len(present) == 2:
        joint = join_modalities(seqs[0], seqs[1], tok.mod_1, tok.mod_2)
        o1, o2 = split_modalities(encode(model.encoder, joint))
        return {model.config.modalities[0]: o1.tokens, model.config.modalities[1]: o2.tokens}
    k = present[0]
    seq = seqs[k]
    seq = seq.with_tokens(seq.tokens + mods[k])
    return {model.config.modalities[k]: encode(model.encoder, seq).tokens}
