"""Dataset manifests, OCT/IR pairing, patient-level stratified splits, and a synthetic paired corpus."""

from __future__ import annotations

import json
import warnings
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from scipy.optimize import linprog

EYES = ("left", "right")
MODALITIES = ("oct", "ir")

Label = Union[None, int, List[int]]


@dataclass(frozen=True)
class ManifestRecord:
    patient_id: str
    eye: str
    visit_id: str
    modality: str
    image_path: str
    label: Label = field(default=None, compare=False, hash=False)

    def __post_init__(self):
        if self.eye not in EYES:
            raise ValueError(f"eye must be one of {EYES}, got {self.eye!r}")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if isinstance(self.label, list):
            object.__setattr__(self, "label", tuple(int(v) for v in self.label))

    @property
    def key(self) -> Tuple[str, str, str]:
        return self.patient_id, self.eye, self.visit_id

    def to_json(self) -> str:
        d = asdict(self)
        if isinstance(d["label"], tuple):
            d["label"] = list(d["label"])
        return json.dumps(d, ensure_ascii=False)


def write_manifest(path, records: Sequence[ManifestRecord]) -> None:
    """One JSON object per line, UTF-8, in record order."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_manifest(path) -> List[ManifestRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(ManifestRecord(**json.loads(line)))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad manifest record: {exc}") from exc
    validate_manifest(records)
    return records


def validate_manifest(records: Sequence[ManifestRecord]) -> None:
    """Reject duplicate (patient, eye, visit, modality, path) tuples and reused image paths."""
    full = Counter((r.patient_id, r.eye, r.visit_id, r.modality, r.image_path) for r in records)
    dups = [k for k, n in full.items() if n > 1]
    paths = Counter(r.image_path for r in records)
    reused = [p for p, n in paths.items() if n > 1]
    if dups or reused:
        raise ValueError(f"duplicate manifest entries: {dups or ''} reused image paths: {reused or ''}")


@dataclass
class Pairing:
    pairs: List[Tuple[ManifestRecord, ManifestRecord]]
    unpaired: List[ManifestRecord]


def build_pairs(records: Sequence[ManifestRecord]) -> Pairing:
    """Pair OCT and IR images from the same patient, eye and visit.

    Within a visit both modalities are sorted by image path and matched in
    order (the first OCT with the first IR, and so on); leftovers are
    reported as unpaired.
    """
    validate_manifest(records)
    groups: Dict[tuple, Dict[str, List[ManifestRecord]]] = defaultdict(lambda: {"oct": [], "ir": []})
    for r in records:
        groups[r.key][r.modality].append(r)
    pairs, unpaired = [], []
    for key in sorted(groups):
        octs = sorted(groups[key]["oct"], key=lambda r: r.image_path)
        irs = sorted(groups[key]["ir"], key=lambda r: r.image_path)
        n = min(len(octs), len(irs))
        pairs.extend(zip(octs[:n], irs[:n]))
        unpaired.extend(octs[n:] + irs[n:])
    return Pairing(pairs, unpaired)


def _patient_stratum(recs: Sequence[ManifestRecord]):
    labels = [r.label for r in recs if r.label is not None]
    if not labels:
        return ("unlabeled",)
    return Counter(labels).most_common(1)[0][0]


def _largest_remainder(n: int, fractions: Sequence[float]) -> np.ndarray:
    raw = np.asarray(fractions) * n
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts


def _controlled_rounding(sizes: np.ndarray, fractions: np.ndarray, totals: np.ndarray) -> np.ndarray:
    """Integer class-by-split counts with exact row sums ``sizes`` and column sums ``totals``.

    Each cell is the floor or ceiling of ``size * fraction``. The leftover
    units form a transportation problem with 0/1 cells, whose constraint
    matrix is totally unimodular, so a simplex vertex is integral. Cells
    with larger fractional parts are preferred.
    """
    exact = sizes[:, None] * fractions[None, :]
    floors = np.floor(exact + 1e-9).astype(int)
    rows = sizes - floors.sum(axis=1)
    cols = totals - floors.sum(axis=0)
    if rows.sum() == 0:
        return floors
    k, s = floors.shape
    a_eq = np.zeros((k + s, k * s))
    for i in range(k):
        a_eq[i, i * s:(i + 1) * s] = 1
    for j in range(s):
        a_eq[k + j, j::s] = 1
    cost = -(exact - floors).ravel()
    res = linprog(cost, A_eq=a_eq, b_eq=np.r_[rows, cols], bounds=(0, 1), method="highs-ds")
    if res.status != 0:
        # no floor/ceil table fits these totals; let cells exceed their ceiling
        res = linprog(cost, A_eq=a_eq, b_eq=np.r_[rows, cols], bounds=(0, None), method="highs-ds")
    if res.status != 0:
        raise AssertionError("split capacity exhausted")
    return floors + np.round(res.x).astype(int).reshape(k, s)


def stratified_split(records: Sequence[ManifestRecord], fractions: Sequence[float] = (0.8, 0.1, 0.1),
                     seed: int = 0, names: Sequence[str] = ("train", "val", "test")
                     ) -> Dict[str, List[ManifestRecord]]:
    """Split by patient so each split's class mix tracks the whole set.

    A patient's class is the most common label among its records. Every
    class/split count is its exact share rounded up or down, and split
    totals match the largest-remainder rounding of the patient count.
    """
    if len(fractions) != len(names):
        raise ValueError("need one fraction per split name")
    if abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be non-negative and sum to 1, got {list(fractions)}")
    by_patient: Dict[str, List[ManifestRecord]] = defaultdict(list)
    for r in records:
        by_patient[r.patient_id].append(r)
    patients = sorted(by_patient)
    active = sum(f > 0 for f in fractions)
    if len(patients) < active:
        raise ValueError(f"{len(patients)} patients cannot fill {active} splits")

    rng = np.random.default_rng(seed)
    strata: Dict[object, List[str]] = defaultdict(list)
    for p in patients:
        strata[_patient_stratum(by_patient[p])].append(p)
    keys = sorted(strata, key=repr)
    for k in keys:
        rng.shuffle(strata[k])

    totals = _largest_remainder(len(patients), fractions)
    assigned = _controlled_rounding(np.array([len(strata[k]) for k in keys]), np.asarray(fractions), totals)
    assigned = dict(zip(keys, assigned))

    split_patients = {n: set() for n in names}
    for k in keys:
        start = 0
        for s, n in enumerate(names):
            split_patients[n].update(strata[k][start:start + assigned[k][s]])
            start += assigned[k][s]
    return {n: [r for r in records if r.patient_id in split_patients[n]] for n in names}


# -- image I/O ---------------------------------------------------------------

def save_image(path, image: np.ndarray) -> None:
    """Write an 8-bit grayscale file; values are clipped to [0, 1] and rounded to 1/255 steps."""
    arr = np.asarray(image, dtype=float)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ValueError(f"only single-channel images can be saved, got {arr.shape}")
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"expected (H, W) or (1, H, W), got {arr.shape}")
    u8 = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(path)


def load_image(path) -> np.ndarray:
    """Read a grayscale image as a ``(1, H, W)`` float array in [0, 1].

    8-bit files map v -> v / 255. 16-bit files map v -> v / 65535 with no
    intermediate rounding; saving such an array rounds to the nearest 8-bit level.
    Colour files are converted to luminance first.
    """
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(img, dtype=np.float64) / 65535.0
            else:
                if img.mode != "L":
                    img = img.convert("L")
                arr = np.asarray(img, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr[None]


def load_images(paths: Sequence, root: Optional[Path] = None) -> np.ndarray:
    """Stack images in the given order into ``(N, 1, H, W)``."""
    root = Path(root) if root is not None else None
    arrs = [load_image(root / p if root is not None else p) for p in paths]
    return np.stack(arrs) if arrs else np.zeros((0, 1, 0, 0))


# -- synthetic corpus -----------------------------------------------------------

@dataclass
class SynthConfig:
    image_size: int = 32
    num_patients: int = 40
    eyes_per_patient: int = 1
    visits_per_patient: int = 2
    num_classes: int = 2
    noise: float = 0.03
    class_shift: float = 0.08
    modality_noise: float = 0.06
    seed: int = 0
    patch_size: int = 8

    def __post_init__(self):
        if self.image_size <= 0 or self.num_patients <= 0 or self.visits_per_patient <= 0:
            raise ValueError("image_size, num_patients and visits_per_patient must be positive")
        if self.eyes_per_patient not in (1, 2):
            raise ValueError("eyes_per_patient must be 1 or 2")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.image_size % self.patch_size:
            warnings.warn(f"image size {self.image_size} is not divisible by patch size "
                          f"{self.patch_size}", UserWarning)


def _severity(cls: int, cfg: SynthConfig) -> float:
    return (cls - (cfg.num_classes - 1) / 2.0) * cfg.class_shift


def render_oct(latent: np.ndarray, severity: float, offset: float, size: int,
               rng: np.random.Generator, noise: float) -> np.ndarray:
    """Horizontal retina-like layers whose shape follows ``latent``; brightness follows severity."""
    y = np.arange(size)[:, None] / size
    x = np.arange(size)[None, :] / size
    curve = 0.04 * (1 + latent[1]) * np.sin(2 * np.pi * (x + 0.1 * latent[2])) + 0.03 * latent[0]
    img = np.full((size, size), 0.12)
    bounds = np.array([0.30, 0.38, 0.50, 0.58, 0.70]) * (1 + 0.05 * latent[1])
    levels = np.array([0.75, 0.45, 0.60, 0.35, 0.85])
    for i in range(len(bounds) - 1):
        top, bottom = bounds[i] + curve, bounds[i + 1] + curve
        band = (y >= top) & (y < bottom)
        img = np.where(band, levels[i], img)
    img = img + severity + offset
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def render_ir(latent: np.ndarray, severity: float, offset: float, size: int,
              rng: np.random.Generator, noise: float) -> np.ndarray:
    """Fundus-like disc: radial falloff, dark fovea, vessel arcs bent by ``latent``."""
    yy, xx = np.mgrid[0:size, 0:size] / size - 0.5
    r = np.sqrt(xx ** 2 + yy ** 2)
    img = 0.55 * np.clip(1.0 - 1.6 * r, 0.0, 1.0) + 0.15
    fovea = np.exp(-((xx - 0.05 * latent[2]) ** 2 + yy ** 2) / 0.006)
    img = img - 0.2 * fovea
    disc_x, disc_y = 0.28, 0.03 * latent[0]
    for k, ang in enumerate((-0.9, -0.35, 0.35, 0.9)):
        bend = ang + 0.25 * latent[1]
        dist = np.abs((yy - disc_y) - np.tan(bend) * (xx - disc_x) * (0.6 + 0.1 * k))
        img = img - 0.18 * np.exp(-(dist / 0.018) ** 2) * (xx < disc_x)
    disc = np.exp(-((xx - disc_x) ** 2 + (yy - disc_y) ** 2) / 0.004)
    img = img + 0.3 * disc + severity + offset
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_paired(cfg: SynthConfig, out_dir) -> List[ManifestRecord]:
    """Render one OCT and one IR image per (patient, eye, visit) and write ``manifest.jsonl``.

    Each patient has a class; each visit draws a latent vector shared by
    both images. Both modalities are brightened by the class ``severity``
    and independently by their own random offset, so either image alone
    carries noisy class evidence and the pair carries more.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    eyes = EYES[: cfg.eyes_per_patient]
    records = []
    for p in range(cfg.num_patients):
        pid = f"P{p:04d}"
        cls = p % cfg.num_classes
        for eye in eyes:
            for v in range(cfg.visits_per_patient):
                vid = f"V{v:02d}"
                latent = rng.normal(size=3)
                sev = _severity(cls, cfg)
                off_oct, off_ir = rng.normal(0.0, cfg.modality_noise, size=2)
                oct_img = render_oct(latent, sev, off_oct, cfg.image_size, rng, cfg.noise)
                ir_img = render_ir(latent, sev, off_ir, cfg.image_size, rng, cfg.noise)
                for mod, img in (("oct", oct_img), ("ir", ir_img)):
                    rel = f"images/{pid}_{eye}_{vid}_{mod}.png"
                    save_image(out_dir / rel, img)
                    records.append(ManifestRecord(pid, eye, vid, mod, rel, cls))
    write_manifest(out_dir / "manifest.jsonl", records)
    return records
