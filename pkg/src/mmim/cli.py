"""Command-line entry points.

Every command is a pure function of its configuration, seed and input
files. Tabular results go to stdout and to tab-separated files; figures
are rendered next to them.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import downstream as ds
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (ManifestRecord, SynthConfig, build_pairs, generate_paired, load_image,
                   load_images, read_manifest, save_image, stratified_split)
from .metrics import MetricRecord, aggregate_seeds
from .mim import MimConfig, MimModel, forward
from .optim import OptimConfig
from .plotting import plot_loss_curve, plot_metric_report, plot_reconstruction
from .train import (Pretrainer, append_log, mask_ratios, model_config, model_from_checkpoint, pretrain_arrays,
                    read_log, resolve_run_dir, run_lock)
from .vit import PatchGrid, unpatchify

REPORT_COLUMNS = ("scope", "metric", "mean", "std", "n_seeds")


class CliError(Exception):
    pass


# -- configuration -------------------------------------------------------------------
def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any configuration key")
    p.add_argument("--run-dir", help="output directory (overrides [run] run_dir and MMIM_RUN_DIR)")
    p.add_argument("--seed", type=int)
    p.add_argument("--manifest")
    p.add_argument("--data-root")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--modalities", choices=("oct", "ir", "oct,ir"))
    p.add_argument("--decoder-mode", choices=("joint", "separate"))
    p.add_argument("--mask-ratio-oct", type=float)
    p.add_argument("--mask-ratio-ir", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--peak-lr", type=float)


def load_run_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    overrides: Dict[str, Dict[str, str]] = {}

    def put(section: str, key: str, value) -> None:
        if value is not None:
            overrides.setdefault(section, {})[key] = str(value)

    put("run", "seed", getattr(args, "seed", None))
    put("data", "manifest", getattr(args, "manifest", None))
    put("data", "root", getattr(args, "data_root", None))
    put("model", "modalities", getattr(args, "modalities", None))
    put("model", "decoder_mode", getattr(args, "decoder_mode", None))
    put("mask", "mask_ratio_oct", getattr(args, "mask_ratio_oct", None))
    put("mask", "mask_ratio_ir", getattr(args, "mask_ratio_ir", None))
    steps = getattr(args, "steps", None)
    put("train", "steps", steps)
    put("optim", "total_steps", steps)
    if steps is not None:
        put("optim", "warmup_steps", min(cfg.optim.warmup_steps, steps))
    put("train", "batch_size", getattr(args, "batch_size", None))
    put("optim", "peak_lr", getattr(args, "peak_lr", None))
    for item in getattr(args, "set", []):
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise CliError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        put(section, name, value)
    for section, values in overrides.items():
        if section not in {"run", "model", "mask", "optim", "train", "data", "eval"}:
            raise CliError(f"unknown config section {section!r}")
        cfg.update(section, values)
    return cfg


def _manifest(cfg: RunConfig) -> List[ManifestRecord]:
    if not cfg.data.manifest:
        raise CliError("no manifest given (use --manifest or [data] manifest)")
    return read_manifest(cfg.data.manifest)


def _data_root(cfg: RunConfig) -> Path:
    return Path(cfg.data.root) if cfg.data.root else Path(cfg.data.manifest).parent


def _emit(lines: Sequence[Sequence], out=None) -> None:
    out = out or sys.stdout
    for row in lines:
        out.write("\t".join(str(v) for v in row) + "\n")


# -- generate-data -------------------------------------------------------------------
def cmd_generate_data(args) -> int:
    cfg = load_run_config(args)
    d = cfg.data
    synth = SynthConfig(image_size=args.image_size or d.image_size,
                        num_patients=args.num_patients or d.num_patients,
                        eyes_per_patient=d.eyes_per_patient,
                        visits_per_patient=args.visits or d.visits_per_patient,
                        num_classes=args.num_classes or d.num_classes,
                        noise=d.noise, class_shift=d.class_shift, modality_noise=d.modality_noise,
                        seed=d.synth_seed if args.seed is None else args.seed,
                        patch_size=cfg.model.patch_size)
    records = generate_paired(synth, args.out)
    _emit([("manifest", Path(args.out) / "manifest.jsonl"), ("records", len(records))])
    return 0


# -- pretrain ------------------------------------------------------------------------
def cmd_pretrain(args) -> int:
    cfg = load_run_config(args)
    run_dir = resolve_run_dir(cfg, args.run_dir)
    model_config(cfg)
    records = _manifest(cfg)
    data = pretrain_arrays(records, cfg.model.modalities, _data_root(cfg))
    trainer = Pretrainer(cfg, data)
    with run_lock(run_dir):
        log = run_dir / "loss_log.tsv"
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        if args.resume:
            trainer.resume(args.resume)
            if log.exists():
                kept = [r for r in read_log(log) if r["step"] <= trainer.step]
                log.unlink()
                append_log(log, kept)
        elif log.exists():
            raise CliError(f"{log} already exists; pass --resume or use a fresh run directory")
        (run_dir / "config.ini").write_text(cfg.to_string(), encoding="utf-8")
        remaining = cfg.train.steps - trainer.step
        if remaining < 0:
            raise CliError(f"checkpoint is at step {trainer.step}, past the configured {cfg.train.steps}")
        trainer.run(remaining, log_path=log, checkpoint_dir=ckpt_dir)
        trainer.save(run_dir / "last.ckpt")
        rows = read_log(log) if log.exists() else []
        if not rows:
            raise CliError("no training steps were run")
        plot_loss_curve(rows, run_dir / "loss_curve.png")
    first, last = rows[0]["loss"], rows[-1]["loss"]
    _emit([("key", "value"), ("steps", trainer.step), ("initial_loss", repr(first)),
           ("final_loss", repr(last)), ("checkpoint", run_dir / "last.ckpt"), ("loss_log", log)])
    return 0


# -- downstream ----------------------------------------------------------------------
def _labels(records: Sequence[ManifestRecord]) -> np.ndarray:
    return np.array([list(r.label) if isinstance(r.label, tuple) else r.label for r in records])


def task_data(records: Sequence[ManifestRecord], modalities: Sequence[str], root) -> ds.TaskData:
    labelled = [r for r in records if r.label is not None]
    if not labelled:
        raise CliError("manifest has no labelled records")
    if len(modalities) == 2:
        pairs = build_pairs(labelled).pairs
        if not pairs:
            raise CliError("no labelled OCT/IR pairs in the manifest")
        by_mod = {m: [a if a.modality == m else b for a, b in pairs] for m in modalities}
        images = {m: load_images([r.image_path for r in recs], root) for m, recs in by_mod.items()}
        return ds.TaskData(images, _labels(by_mod[modalities[0]]))
    recs = sorted((r for r in labelled if r.modality == modalities[0]), key=lambda r: r.image_path)
    if not recs:
        raise CliError(f"no labelled {modalities[0]} images in the manifest")
    return ds.TaskData({modalities[0]: load_images([r.image_path for r in recs], root)}, _labels(recs))


def _split(cfg: RunConfig, records) -> Dict[str, List[ManifestRecord]]:
    return stratified_split(records, cfg.eval.split, seed=cfg.eval.split_seed)


def _downstream_config(cfg: RunConfig, mode: str) -> ds.DownstreamConfig:
    e = cfg.eval
    probe = mode == "linear_probe"
    optim = OptimConfig(algorithm=e.probe_algorithm if probe else e.finetune_algorithm,
                        peak_lr=e.probe_peak_lr if probe else e.finetune_peak_lr,
                        weight_decay=e.probe_weight_decay if probe else e.finetune_weight_decay,
                        warmup_steps=min(e.warmup_steps, e.steps), total_steps=e.steps,
                        stage_decay=None if probe else e.stage_decay, ema_decay=e.ema_decay)
    return ds.DownstreamConfig(mode=mode, steps=e.steps, batch_size=e.batch_size, seeds=e.seeds,
                               optim=optim, threshold=e.threshold)


def report_rows(per_seed: Sequence[Dict[str, float]], seeds: Sequence[int],
                records: Sequence[MetricRecord]) -> List[tuple]:
    rows = [REPORT_COLUMNS]
    for seed, metrics in zip(seeds, per_seed):
        rows.extend((f"seed={seed}", k, repr(float(v)), "-", 1) for k, v in metrics.items())
    rows.extend(("aggregate", r.name, repr(r.mean), repr(r.std), r.n_seeds) for r in records)
    return rows


def write_tsv(path, rows: Sequence[Sequence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        _emit(rows, fh)


def classifier_checkpoint(clf: ds.Classifier, seed: int) -> Checkpoint:
    cfg = {"kind": "classifier", "model": clf.backbone.config.to_dict(),
           "num_classes": clf.num_classes, "modalities": clf.modalities,
           "multilabel": clf.multilabel, "seed": seed}
    return Checkpoint(cfg, {f"model/{n}": p.data for n, p in clf.named_parameters()}, None, 0, {})


def classifier_from_checkpoint(ckpt: Checkpoint) -> ds.Classifier:
    c = ckpt.config
    if c.get("kind") != "classifier":
        raise CheckpointError("not a classifier checkpoint")
    clf = ds.Classifier(MimModel(MimConfig(**c["model"])), c["num_classes"], c["modalities"],
                        seed=c["seed"], multilabel=c["multilabel"])
    clf.load_state_dict(ckpt.group("model"))
    return clf


def _cmd_adapt(args, mode: str) -> int:
    cfg = load_run_config(args)
    run_dir = resolve_run_dir(cfg, args.run_dir)
    backbone = model_from_checkpoint(load_checkpoint(args.checkpoint))
    mods = list(cfg.eval.modalities) or list(backbone.config.modalities)
    if args.modalities:
        mods = args.modalities.split(",")
    records = _manifest(cfg)
    root = _data_root(cfg)
    splits = _split(cfg, records)
    train, test = task_data(splits["train"], mods, root), task_data(splits["test"], mods, root)
    num_classes = cfg.eval.num_classes or None
    if num_classes is None and not train.multilabel:
        num_classes = int(max(train.labels.max(), test.labels.max())) + 1
    result = ds.run_eval(backbone, train, test, _downstream_config(cfg, mode), mods, num_classes)
    if mode == "linear_probe" and any(d != result.backbone_digest_before for d in result.backbone_digest_after):
        raise RuntimeError("backbone digest changed during linear probing")
    with run_lock(run_dir):
        for seed, clf in zip(result.seeds, result.classifiers):
            save_checkpoint(run_dir / f"{mode}_seed{seed}.ckpt", classifier_checkpoint(clf, seed))
        rows = report_rows(result.per_seed, result.seeds, result.records)
        write_tsv(run_dir / f"{mode}_report.tsv", rows)
        plot_metric_report(result.records, run_dir / f"{mode}_metrics.png")
    _emit(rows)
    return 0


def cmd_probe(args) -> int:
    return _cmd_adapt(args, "linear_probe")


def cmd_finetune(args) -> int:
    return _cmd_adapt(args, "finetune")


def cmd_eval(args) -> int:
    cfg = load_run_config(args)
    run_dir = resolve_run_dir(cfg, args.run_dir)
    records = _manifest(cfg)
    split = _split(cfg, records)[args.split] if args.split != "all" else records
    per_seed, seeds = [], []
    for path in args.checkpoint:
        clf = classifier_from_checkpoint(load_checkpoint(path))
        mods = args.modalities.split(",") if args.modalities else clf.modalities
        extra = set(mods) - set(clf.modalities)
        if extra:
            raise CliError(f"head was trained on {clf.modalities}; cannot evaluate with {sorted(extra)}")
        data = task_data(split, mods, _data_root(cfg))
        per_seed.append(ds.evaluate(clf, data, cfg.eval.threshold))
        seeds.append(load_checkpoint(path).config["seed"])
    records_out = aggregate_seeds(per_seed)
    rows = report_rows(per_seed, seeds, records_out)
    with run_lock(run_dir):
        write_tsv(run_dir / "eval_report.tsv", rows)
        plot_metric_report(records_out, run_dir / "eval_metrics.png")
    _emit(rows)
    return 0


# -- reconstruct ---------------------------------------------------------------------
def _reconstruct_inputs(args, model: MimModel, cfg: RunConfig) -> List[Dict[str, Path]]:
    mods = list(model.config.modalities)
    if args.image:
        given: Dict[str, List[Path]] = {m: [] for m in mods}
        for item in args.image:
            mod, sep, path = item.partition("=")
            if not sep and len(mods) == 1:
                mod, path = mods[0], item
            if mod not in given:
                raise CliError(f"--image modality {mod!r} not in checkpoint modalities {mods}")
            given[mod].append(Path(path))
        counts = {len(v) for v in given.values()}
        if len(counts) != 1 or 0 in counts:
            raise CliError(f"need the same number of images for each of {mods}")
        return [dict(zip(mods, paths)) for paths in zip(*given.values())]
    records = _manifest(cfg)
    root = _data_root(cfg)
    if len(mods) == 2:
        pairs = build_pairs(records).pairs
        items = [{r.modality: root / r.image_path for r in pair} for pair in pairs]
    else:
        items = [{mods[0]: root / r.image_path}
                 for r in sorted(records, key=lambda r: r.image_path) if r.modality == mods[0]]
    return items[: args.limit]


def _masked_view(x: np.ndarray, m: np.ndarray, grid: PatchGrid, fill: float = 0.5) -> np.ndarray:
    return unpatchify(np.where(m[:, None], fill, x), grid)


def cmd_reconstruct(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    cfg = RunConfig.from_dict(ckpt.config["run"]) if "run" in ckpt.config else RunConfig()
    if args.manifest:
        cfg.update("data", {"manifest": args.manifest})
    if args.data_root:
        cfg.update("data", {"root": args.data_root})
    cfg.update("model", {"modalities": ",".join(model.config.modalities)})
    rhos = mask_ratios(cfg)
    if args.rho is not None:
        rhos = [args.rho] * len(rhos)
    out_dir = Path(args.out_dir)
    items = _reconstruct_inputs(args, model, cfg)
    if not items:
        raise CliError("no inputs to reconstruct")
    mods = list(model.config.modalities)
    images = {}
    for k, m in enumerate(mods):
        grid = model.config.grid(k)
        stack = []
        for item in items:
            img = load_image(item[m])
            h, w = img.shape[1:]
            if h % grid.patch_size or w % grid.patch_size:
                raise CliError(f"{item[m]}: image size {h}x{w} is not divisible by patch size {grid.patch_size}")
            if (h, w) != (grid.image_height, grid.image_width):
                raise CliError(f"{item[m]}: image size {h}x{w} does not match the model's "
                               f"{grid.image_height}x{grid.image_width}")
            stack.append(img)
        images[m] = np.stack(stack)

    out = forward(model, [images[m] for m in mods], rhos, seed=args.seed,
                  paste_visible=not args.raw_predictions)
    with run_lock(out_dir):
        panels, titles, arrays, rows = [], [], {}, [("index", "modality", "rho", "masked_mse")]
        for k, m in enumerate(mods):
            grid = model.config.grid(k)
            x, mask, recon = out.targets[k], out.masks[k].m, out.reconstructions[k]
            pred = out.predictions[k].data
            masked = np.stack([_masked_view(x[i], mask[i], grid) for i in range(len(items))])
            arrays[f"{m}_original"], arrays[f"{m}_masked"] = images[m], masked
            arrays[f"{m}_recon"], arrays[f"{m}_mask"] = recon, mask
            for i in range(len(items)):
                stem = out_dir / f"{i:03d}_{m}"
                save_image(f"{stem}_original.png", images[m][i])
                save_image(f"{stem}_masked.png", masked[i])
                save_image(f"{stem}_recon.png", recon[i])
                panels.append({"original": images[m][i], "masked": masked[i], "recon": recon[i]})
                titles.append(f"{i} {m}")
                sel = mask[i] if mask[i].any() else np.ones_like(mask[i])
                mse = float(((pred[i] - x[i]) ** 2)[sel].mean())
                rows.append((i, m, repr(float(rhos[k])), repr(mse)))
        np.savez(out_dir / "reconstructions.npz", **arrays)
        plot_reconstruction(panels, titles, out_dir / "reconstructions.png")
        write_tsv(out_dir / "reconstruction_mse.tsv", rows)
    _emit(rows)
    return 0


# -- entry point ---------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmim", description="Masked image modelling for paired OCT/IR scans")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="render a synthetic paired OCT/IR dataset")
    _add_run_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--num-patients", type=int)
    p.add_argument("--visits", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("pretrain", help="masked image modelling pretraining")
    _add_run_flags(p)
    _add_model_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_pretrain)

    for name, func, text in (("probe", cmd_probe, "linear probe on frozen features"),
                             ("finetune", cmd_finetune, "finetune backbone and head")):
        p = sub.add_parser(name, help=text)
        _add_run_flags(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--modalities", choices=("oct", "ir", "oct,ir"))
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="score saved heads, optionally with a modality missing")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True, nargs="+")
    p.add_argument("--modalities", choices=("oct", "ir", "oct,ir"))
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reconstruct", help="original | masked | reconstruction panels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", action="append", default=[], metavar="[MOD=]PATH")
    p.add_argument("--manifest")
    p.add_argument("--data-root")
    p.add_argument("--limit", type=int, default=4)
    p.add_argument("--rho", type=float, help="mask ratio for every modality (0 shows full predictions)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--raw-predictions", action="store_true",
                   help="show decoder output at visible patches too, instead of the original pixels")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_reconstruct)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, CheckpointError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
