"""Downstream adaptation: pooled linear heads, probing vs finetuning, and seed-averaged evaluation."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import metrics
from .autodiff import Tensor
from .mim import MimModel, encode_features
from .nn import Module, digest, parameter
from .optim import OptimConfig, Optimizer
from .vit import TokenSequence

MODES = ("linear_probe", "finetune")


def pool_features(desc) -> Tensor:
    """Mean over tokens: ``(N, D) -> (D,)`` or ``(B, N, D) -> (B, D)``; padding is skipped."""
    if isinstance(desc, TokenSequence):
        if desc.length == 0:
            raise ValueError("cannot pool an empty sequence")
        valid = (~desc.pad).astype(desc.tokens.data.dtype)
        counts = valid.sum(axis=1, keepdims=True)
        if np.any(counts == 0):
            raise ValueError("cannot pool an empty sequence")
        return (desc.tokens * valid[..., None]).sum(axis=1) * (1.0 / counts)
    desc = desc if isinstance(desc, Tensor) else Tensor(desc)
    if desc.ndim < 2 or desc.shape[-2] == 0:
        raise ValueError("cannot pool an empty sequence")
    return desc.mean(axis=-2)


def fuse_multimodal(desc1, desc2) -> Tensor:
    """concat(pool(desc1), pool(desc2)) along the feature axis."""
    p1, p2 = pool_features(desc1), pool_features(desc2)
    return ad.concat([p1, p2], axis=-1)


class LinearHead(Module):
    def __init__(self, in_width: int, num_classes: int, rng: np.random.Generator, std: float = 0.01):
        self.weight = parameter(rng.normal(0.0, std, size=(in_width, num_classes)), "weight")
        self.bias = parameter(np.zeros(num_classes), "bias")

    @property
    def in_width(self) -> int:
        return self.weight.shape[0]

    def forward(self, features: Tensor) -> Tensor:
        if features.shape[-1] != self.in_width:
            raise ValueError(f"feature width {features.shape[-1]} != head input {self.in_width}")
        return features @ self.weight + self.bias


class Classifier(Module):
    """Pretrained encoder (decoders dropped) + a linear head on pooled features.

    ``modalities`` lists the inputs the head was trained on; with several,
    pooled features are concatenated in the backbone's modality order. A
    modality missing at prediction time is zero-filled in the fused vector.
    """

    def __init__(self, backbone: MimModel, num_classes: int, modalities: Sequence[str],
                 seed: int = 0, multilabel: bool = False):
        unknown = [m for m in modalities if m not in backbone.config.modalities]
        if unknown or not modalities:
            raise ValueError(f"modalities {list(modalities)} not available in backbone "
                             f"{backbone.config.modalities}")
        bb = copy.deepcopy(backbone)
        bb.decoders = []
        self.backbone = bb
        self._modalities = [m for m in bb.config.modalities if m in modalities]
        self._multilabel = multilabel
        width = bb.config.vit.width * len(self._modalities)
        self.head = LinearHead(width, num_classes, np.random.default_rng(seed))

    @property
    def modalities(self) -> List[str]:
        return list(self._modalities)

    @property
    def multilabel(self) -> bool:
        return self._multilabel

    @property
    def num_classes(self) -> int:
        return self.head.weight.shape[1]

    def backbone_digest(self) -> str:
        return digest(self.backbone.named_parameters())

    def features(self, images: Dict[str, np.ndarray]) -> Tensor:
        present = {m: images[m] for m in self._modalities if images.get(m) is not None}
        if not present:
            raise ValueError(f"none of the head's modalities {self._modalities} were given")
        enc = encode_features(self.backbone, present)
        parts = []
        for m in self._modalities:
            if m in enc:
                parts.append(pool_features(enc[m]))
            else:
                b = len(next(iter(present.values())))
                parts.append(Tensor(np.zeros((b, self.backbone.config.vit.width))))
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)

    def forward(self, images: Dict[str, np.ndarray]) -> Tensor:
        return self.head(self.features(images))

    def loss(self, logits: Tensor, labels: np.ndarray) -> Tensor:
        if self._multilabel:
            return ad.bce_with_logits(logits, labels)
        return ad.cross_entropy(logits, labels)


@dataclass
class TaskData:
    """Images per modality (each ``(N, C, H, W)``) and labels (``(N,)`` ids or ``(N, K)`` bits)."""

    images: Dict[str, np.ndarray]
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        sizes = {len(v) for v in self.images.values() if v is not None}
        if len(sizes) > 1 or (sizes and sizes.pop() != len(self.labels)):
            raise ValueError("every modality needs one image per label")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def multilabel(self) -> bool:
        return self.labels.ndim == 2

    def subset(self, idx) -> "TaskData":
        return TaskData({k: (v[idx] if v is not None else None) for k, v in self.images.items()},
                        self.labels[idx])

    def only(self, modalities: Sequence[str]) -> "TaskData":
        return TaskData({k: v for k, v in self.images.items() if k in modalities}, self.labels)


@dataclass
class DownstreamConfig:
    mode: str = "linear_probe"
    steps: int = 300
    batch_size: int = 32
    seeds: Tuple[int, ...] = (0, 1, 2)
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(
        algorithm="sgd", peak_lr=1e-2, warmup_steps=10, total_steps=300, weight_decay=0.0))
    threshold: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch_size must be positive")
        self.seeds = tuple(self.seeds)


def _check_labels(clf: Classifier, labels: np.ndarray) -> None:
    if labels.ndim == 2:
        if not clf.multilabel or labels.shape[1] != clf.num_classes:
            raise ValueError(f"label width {labels.shape[1]} does not match head "
                             f"({clf.num_classes} classes, multilabel={clf.multilabel})")
    elif labels.size and (labels.min() < 0 or labels.max() >= clf.num_classes):
        raise ValueError(f"labels span [{labels.min()}, {labels.max()}] but the head has "
                         f"{clf.num_classes} classes")


def _pooled(clf: Classifier, data: TaskData, chunk: int = 64) -> np.ndarray:
    out = []
    for start in range(0, len(data), chunk):
        part = data.subset(slice(start, start + chunk))
        out.append(clf.features(part.images).data)
    return np.concatenate(out, axis=0)


def train_downstream(clf: Classifier, data: TaskData, cfg: DownstreamConfig, seed: int = 0) -> List[float]:
    """Train in place. Linear probing updates only the head; finetuning updates everything.

    Returns the per-step training losses.
    """
    _check_labels(clf, data.labels)
    rng = np.random.default_rng(seed)
    probe = cfg.mode == "linear_probe"
    clf.backbone.requires_grad_(not probe)
    params = clf.head.named_parameters(prefix="head.") if probe else clf.named_parameters()
    opt = Optimizer(list(params), cfg.optim, encoder_depth=clf.backbone.config.vit.depth)
    feats = _pooled(clf, data) if probe else None
    before = clf.backbone_digest() if probe else None
    losses = []
    n = len(data)
    for _ in range(cfg.steps):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        opt.zero_grad()
        if probe:
            logits = clf.head(Tensor(feats[idx]))
        else:
            logits = clf(data.subset(idx).images)
        loss = clf.loss(logits, data.labels[idx])
        loss.backward()
        opt.step()
        losses.append(loss.item())
    if probe and clf.backbone_digest() != before:
        raise RuntimeError("backbone parameters changed during linear probing")
    return losses


def predict_scores(clf: Classifier, images: Dict[str, np.ndarray], chunk: int = 64) -> np.ndarray:
    """Class probabilities (softmax), or per-label sigmoid scores for multilabel heads."""
    n = len(next(v for v in images.values() if v is not None))
    out = []
    for start in range(0, n, chunk):
        part = {k: (v[start:start + chunk] if v is not None else None) for k, v in images.items()}
        z = clf(part).data
        if clf.multilabel:
            out.append(0.5 * (1.0 + np.tanh(0.5 * z)))
        else:
            e = np.exp(z - z.max(axis=1, keepdims=True))
            out.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(out, axis=0)


def task_metrics(labels: np.ndarray, scores: np.ndarray, threshold: float = 0.0) -> Dict[str, float]:
    """Metric set per task type: multilabel, binary, or multiclass."""
    labels = np.asarray(labels)
    if labels.ndim == 2:
        prob_threshold = 1.0 / (1.0 + np.exp(-threshold))
        preds = scores >= prob_threshold
        out = {"mf1": metrics.multilabel_f1(labels, preds, "macro"),
               "micro_f1": metrics.multilabel_f1(labels, preds, "micro")}
        try:
            out["map"] = metrics.mean_average_precision(labels, scores, "macro")
            out["micro_ap"] = metrics.mean_average_precision(labels, scores, "micro")
        except ValueError:
            pass
        return out
    k = scores.shape[1]
    preds = scores.argmax(axis=1)
    out = {"accuracy": metrics.accuracy(labels, preds), "mf1": metrics.macro_f1(labels, preds, k)}
    if k == 2 and 0 < labels.sum() < labels.size:
        out["roc_auc"] = metrics.roc_auc(labels, scores[:, 1])
        out["pr_auc"] = metrics.average_precision(labels, scores[:, 1])
    elif k > 2:
        try:
            out["roc_auc"] = metrics.roc_auc_ovr(labels, scores)
        except ValueError:
            pass
    return out


def evaluate(clf: Classifier, data: TaskData, threshold: float = 0.0) -> Dict[str, float]:
    _check_labels(clf, data.labels)
    return task_metrics(data.labels, predict_scores(clf, data.images), threshold)


@dataclass
class EvalRun:
    mode: str
    modalities: List[str]
    seeds: List[int]
    per_seed: List[Dict[str, float]]
    records: List[metrics.MetricRecord]
    backbone_digest_before: str
    backbone_digest_after: List[str]
    classifiers: List[Classifier] = field(default_factory=list, repr=False)


def run_eval(backbone: MimModel, train: TaskData, test: TaskData, cfg: DownstreamConfig,
             modalities: Optional[Sequence[str]] = None, num_classes: Optional[int] = None) -> EvalRun:
    """Train one head per seed on ``train`` and score it on ``test``."""
    modalities = list(modalities or backbone.config.modalities)
    if num_classes is None:
        num_classes = train.labels.shape[1] if train.multilabel else int(train.labels.max()) + 1
    before = digest(backbone.backbone_parameters())
    per_seed, after, clfs = [], [], []
    for seed in cfg.seeds:
        clf = Classifier(backbone, num_classes, modalities, seed=seed, multilabel=train.multilabel)
        train_downstream(clf, train, cfg, seed=seed)
        per_seed.append(evaluate(clf, test, cfg.threshold))
        after.append(clf.backbone_digest())
        clfs.append(clf)
    return EvalRun(cfg.mode, modalities, list(cfg.seeds), per_seed,
                   metrics.aggregate_seeds(per_seed), before, after, clfs)
