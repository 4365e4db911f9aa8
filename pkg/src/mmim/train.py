"""Pretraining loop with step-indexed loss logs and bitwise-resumable checkpoints."""

from __future__ import annotations

import os
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import ManifestRecord, build_pairs, load_images
from .mim import MimConfig, MimModel, forward
from .optim import Optimizer
from .vit import VitConfig

RUN_DIR_ENV = "MMIM_RUN_DIR"
LOG_COLUMNS = ("step", "lr", "loss", "loss_oct", "loss_ir")
LOCK_NAME = ".lock"


class RunLockedError(RuntimeError):
    pass


def model_config(cfg: RunConfig) -> MimConfig:
    """Translate the [model] section; one modality always means a single decoder."""
    m = cfg.model
    mods = tuple(m.modalities)
    if len(mods) not in (1, 2) or len(set(mods)) != len(mods):
        raise ValueError(f"modalities must be one or two distinct names, got {list(mods)}")
    mode = m.decoder_mode
    if len(mods) == 1:
        if mode == "separate":
            raise ValueError("decoder_mode=separate needs two modalities")
        mode = "unimodal"
    elif mode == "unimodal":
        raise ValueError("two modalities need decoder_mode joint or separate")
    vit = VitConfig(depth=m.depth, heads=m.heads, width=m.width, mlp_ratio=m.mlp_ratio,
                    patch_size=m.patch_size, decoder_depth=m.decoder_depth,
                    decoder_width=m.decoder_width, decoder_heads=m.decoder_heads,
                    channels=m.channels)
    sizes = tuple((m.image_size, m.image_size) for _ in mods)
    return MimConfig(vit=vit, decoder_mode=mode, modalities=mods, image_sizes=sizes,
                     norm_target=m.norm_target)


def mask_ratios(cfg: RunConfig) -> List[float]:
    table = {"oct": cfg.mask.mask_ratio_oct, "ir": cfg.mask.mask_ratio_ir}
    return [table[m] for m in cfg.model.modalities]


def resolve_run_dir(cfg: RunConfig, override: Optional[str] = None) -> Path:
    """Explicit argument, then the environment variable, then ``[run] run_dir``."""
    return Path(override or os.environ.get(RUN_DIR_ENV) or cfg.run.run_dir)


@contextmanager
def run_lock(run_dir) -> Iterator[Path]:
    """Exclusive ownership of ``run_dir`` for the duration of the block."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / LOCK_NAME
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockedError(f"run directory {run_dir} is locked by another process ({path})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        path.unlink(missing_ok=True)


def pretrain_arrays(records: Sequence[ManifestRecord], modalities: Sequence[str],
                    root=None) -> List[np.ndarray]:
    """Image stacks per modality; two modalities are aligned through visit pairing."""
    if len(modalities) == 1:
        paths = sorted(r.image_path for r in records if r.modality == modalities[0])
        if not paths:
            raise ValueError(f"dataset has no {modalities[0]} images")
        return [load_images(paths, root)]
    pairing = build_pairs(records)
    if not pairing.pairs:
        raise ValueError("dataset has no paired visits")
    first = [p[0] if p[0].modality == modalities[0] else p[1] for p in pairing.pairs]
    second = [p[1] if p[0].modality == modalities[0] else p[0] for p in pairing.pairs]
    return [load_images([r.image_path for r in first], root),
            load_images([r.image_path for r in second], root)]


def _fmt(x: Optional[float]) -> str:
    return "-" if x is None else repr(float(x))


class Pretrainer:
    """Owns model, optimizer and the single generator that drives batches and masks."""

    def __init__(self, cfg: RunConfig, data: Sequence[np.ndarray]):
        self.cfg = cfg
        self.data = [np.asarray(d, dtype=ad.get_default_dtype()) for d in data]
        if not self.data or len(self.data[0]) == 0:
            raise ValueError("dataset is empty")
        self.model = MimModel(model_config(cfg), seed=cfg.run.seed)
        if len(self.data) != len(self.model.config.modalities):
            raise ValueError(f"need {len(self.model.config.modalities)} image stacks, got {len(self.data)}")
        self.optimizer = Optimizer(self.model.named_parameters(), cfg.optim,
                                   encoder_depth=cfg.model.depth)
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.run.seed, 1]))
        self.rhos = mask_ratios(cfg)

    @property
    def step(self) -> int:
        return self.optimizer.step_count

    def train_step(self) -> Dict[str, Optional[float]]:
        n = len(self.data[0])
        size = self.cfg.train.batch_size
        idx = self.rng.choice(n, size=size, replace=size > n)
        self.optimizer.zero_grad()
        out = forward(self.model, [d[idx] for d in self.data], self.rhos, rng=self.rng,
                      fixed_count=self.cfg.mask.fixed_count)
        out.loss.backward()
        lr = self.optimizer.step()
        parts = dict(zip(self.model.config.modalities, out.loss_values))
        return {"step": self.step, "lr": lr, "loss": out.loss.item(),
                "loss_oct": parts.get("oct"), "loss_ir": parts.get("ir")}

    def run(self, steps: int, log_path=None, checkpoint_dir=None,
            checkpoint_every: Optional[int] = None) -> List[Dict[str, Optional[float]]]:
        rows = []
        every = checkpoint_every or self.cfg.train.checkpoint_every
        for _ in range(steps):
            row = self.train_step()
            rows.append(row)
            if log_path is not None:
                append_log(log_path, [row])
            if checkpoint_dir is not None and every and self.step % every == 0:
                self.save(Path(checkpoint_dir) / f"step_{self.step:06d}.ckpt")
        return rows

    # -- checkpoint state -------------------------------------------------------------
    def to_checkpoint(self) -> Checkpoint:
        tensors = {f"model/{n}": p.data for n, p in self.model.named_parameters()}
        tensors.update({f"optim/{k}": v for k, v in self.optimizer.state_arrays().items()
                        if not k.startswith("ema/")})
        tensors.update({k: v for k, v in self.optimizer.state_arrays().items() if k.startswith("ema/")})
        config = {"kind": "mim", "model": self.model.config.to_dict(), "run": self.cfg.to_dict()}
        meta = {"optim_t": int(self.optimizer.state.get("t", 0))}
        return Checkpoint(config, tensors, self.rng.bit_generator.state, self.step, meta)

    def save(self, path) -> None:
        save_checkpoint(path, self.to_checkpoint())

    def restore(self, ckpt: Checkpoint) -> None:
        if ckpt.config.get("kind") != "mim":
            raise CheckpointError("not a pretraining checkpoint")
        if ckpt.config.get("model") != self.model.config.to_dict():
            raise CheckpointError("checkpoint model config differs from the run config")
        self.model.load_state_dict(ckpt.group("model"))
        arrays = {f"m/{k}": v for k, v in ckpt.group("optim/m").items()}
        arrays.update({f"v/{k}": v for k, v in ckpt.group("optim/v").items()})
        arrays.update({f"ema/{k}": v for k, v in ckpt.group("ema").items()})
        self.optimizer.load_state_arrays(arrays, ckpt.meta.get("optim_t", 0), ckpt.step)
        self.rng.bit_generator.state = ckpt.rng_state

    def resume(self, path) -> None:
        self.restore(load_checkpoint(path))


def append_log(path, rows: Sequence[Dict[str, Optional[float]]]) -> None:
    """Append rows to a tab-separated loss log, writing the header for a new file."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", encoding="utf-8") as fh:
        if new:
            fh.write("\t".join(LOG_COLUMNS) + "\n")
        for row in rows:
            fh.write("\t".join([str(int(row["step"]))] + [_fmt(row[c]) for c in LOG_COLUMNS[1:]]) + "\n")


def read_log(path) -> List[Dict[str, Optional[float]]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != LOG_COLUMNS:
            raise ValueError(f"{path}: unexpected loss-log columns {header}")
        for line in fh:
            vals = line.rstrip("\n").split("\t")
            row = {c: (None if v == "-" else float(v)) for c, v in zip(LOG_COLUMNS, vals)}
            row["step"] = int(row["step"])
            rows.append(row)
    return rows


def model_from_checkpoint(ckpt: Checkpoint) -> MimModel:
    """Rebuild a pretrained model (decoders included) from a pretraining checkpoint."""
    if ckpt.config.get("kind") != "mim":
        raise CheckpointError("not a pretraining checkpoint")
    model = MimModel(MimConfig(**ckpt.config["model"]))
    model.load_state_dict(ckpt.group("model"))
    return model
