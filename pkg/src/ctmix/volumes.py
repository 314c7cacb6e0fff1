"""Volumetric scan data model: loading, resizing, manifests, and synthetic phantoms.

Scans live on disk as directories of 8-bit grayscale slice images
(``<root>/<scan_id>/<index>.png``) next to a ``labels.csv`` with header
``scan_id,label``. Intensities are normalized by max-range division
(value / 255) so constant scans stay constant.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .errors import (
    InvalidArgument,
    InvalidConfig,
    MalformedScan,
    NotFound,
    Refused,
    StratificationError,
)

SLICE_EXTENSIONS = (".png", ".jpg", ".jpeg")


@dataclass
class CTVolume:
    """A single scan as a dense (depth, height, width) grid of values in [0, 1]."""

    voxels: np.ndarray
    scan_id: str

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise InvalidArgument(f"volume must be (T,H,W) with all dims >= 1, got {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise InvalidArgument(f"volume {self.scan_id!r} contains non-finite voxels")
        if self.voxels.min() < 0.0 or self.voxels.max() > 1.0:
            raise InvalidArgument(f"volume {self.scan_id!r} has voxels outside [0, 1]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]


@dataclass(frozen=True)
class ScanRecord:
    """Manifest entry: scan identity, class index (0 or 1), and storage locator."""

    scan_id: str
    label: int
    path: str

    def __post_init__(self):
        if self.label not in (0, 1):
            raise InvalidArgument(f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class LungGeometry:
    """Two axis-aligned ellipsoids, given as (t, y, x) fractions of the volume size."""

    centers: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (0.5, 0.52, 0.3),
        (0.5, 0.52, 0.7),
    )
    semiaxes: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (0.42, 0.34, 0.18),
        (0.42, 0.34, 0.18),
    )


@dataclass(frozen=True)
class PhantomConfig:
    """Deterministic chest-phantom recipe; ``seed`` fully determines the output."""

    size: tuple[int, int, int] = (16, 64, 64)
    lesion_count_range: tuple[int, int] = (1, 2)
    lesion_intensity: tuple[float, float] = (0.75, 0.95)
    lesion_radius_range: tuple[float, float] = (2.8, 3.8)
    lungs: LungGeometry = field(default_factory=LungGeometry)
    seed: int = 0

    # intensity bands; with the flat-top lesion profile every lesion core
    # stays above LESION_THRESHOLD while tissue and lungs stay below it
    AIR_LEVEL = 0.02
    LUNG_LEVEL = 0.15
    TISSUE_LEVEL = 0.5
    NOISE_AMPLITUDE = 0.02
    LESION_THRESHOLD = 0.6


def load_scan(record: ScanRecord) -> CTVolume:
    """Load a scan directory of slice images into a normalized volume.

    Slices are read in lexicographic filename order; depth equals the file
    count. Raises NotFound for a missing path and MalformedScan when no
    slices exist or their shapes disagree.
    """
    root = Path(record.path)
    if not root.exists():
        raise NotFound(f"scan path does not exist: {root}")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in SLICE_EXTENSIONS)
    if not files:
        raise MalformedScan(f"no slice images under {root}")
    slices = []
    shape = None
    for f in files:
        try:
            with Image.open(f) as img:
                arr = np.asarray(img.convert("L"), dtype=np.float32)
        except Exception as exc:
            raise MalformedScan(f"unreadable slice {f}: {exc}") from exc
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise MalformedScan(f"ragged slice shapes in {root}: {arr.shape} vs {shape}")
        slices.append(arr / 255.0)
    return CTVolume(np.stack(slices, axis=0), record.scan_id)


def resize_volume(v: CTVolume, target: tuple[int, int, int]) -> CTVolume:
    """Trilinear resize with half-pixel-centered sampling; identity at equal shape."""
    if len(target) != 3 or any(int(d) < 1 for d in target):
        raise InvalidArgument(f"target dims must all be >= 1, got {target}")
    target = tuple(int(d) for d in target)
    if v.shape == target:
        return CTVolume(v.voxels.copy(), v.scan_id)
    t = torch.from_numpy(v.voxels)[None, None]
    out = torch.nn.functional.interpolate(t, size=target, mode="trilinear", align_corners=False)
    return CTVolume(out[0, 0].clamp_(0.0, 1.0).numpy(), v.scan_id)


def _ellipsoid_mask(size, center_frac, semiaxes_frac) -> np.ndarray:
    dims = np.array(size, dtype=np.float64)
    coords = np.meshgrid(*[(np.arange(n) + 0.5) / n for n in size], indexing="ij")
    rho2 = np.zeros(size, dtype=np.float64)
    for axis in range(3):
        rho2 += ((coords[axis] - center_frac[axis]) / semiaxes_frac[axis]) ** 2
    return rho2 <= 1.0, coords


def _lesion_fits(center_frac, radius_vox, lung_center, lung_axes, size) -> bool:
    # conservative containment: center depth inside the lung ellipsoid must
    # exceed the lesion extent along every axis (fractional units)
    rho = math.sqrt(
        sum(((center_frac[a] - lung_center[a]) / lung_axes[a]) ** 2 for a in range(3))
    )
    margin = max(radius_vox[a] / (lung_axes[a] * size[a]) for a in range(3))
    return rho + margin <= 0.92


def generate_phantom_with_mask(
    cfg: PhantomConfig, label: int
) -> tuple[CTVolume, ScanRecord, np.ndarray]:
    """Build a phantom plus its boolean lesion mask (all False for class 0).

    Class 0 and class 1 phantoms with the same seed share identical anatomy;
    the class only controls lesion insertion, so the mask localizes exactly
    what distinguishes the classes.
    """
    if label not in (0, 1):
        raise InvalidArgument(f"class must be 0 or 1, got {label}")
    size = tuple(int(d) for d in cfg.size)
    if min(size) < 4:
        raise InvalidConfig(f"phantom size too small for lung geometry: {size}")
    lo, hi = cfg.lesion_count_range
    if lo < 1 or hi < lo:
        raise InvalidConfig(f"bad lesion_count_range {cfg.lesion_count_range}")

    anatomy_rng = np.random.default_rng(np.random.SeedSequence((int(cfg.seed), 0)))
    lesion_rng = np.random.default_rng(np.random.SeedSequence((int(cfg.seed), 1)))

    vox = np.full(size, PhantomConfig.TISSUE_LEVEL, dtype=np.float64)
    body_mask, coords = _ellipsoid_mask(size, (0.5, 0.5, 0.5), (0.55, 0.48, 0.48))
    vox[~body_mask] = PhantomConfig.AIR_LEVEL

    # jitter lung geometry per scan, then carve both lungs
    lung_masks = []
    lung_params = []
    for center, axes in zip(cfg.lungs.centers, cfg.lungs.semiaxes):
        c = tuple(center[a] + anatomy_rng.uniform(-0.02, 0.02) for a in range(3))
        ax = tuple(axes[a] * anatomy_rng.uniform(0.9, 1.05) for a in range(3))
        mask, _ = _ellipsoid_mask(size, c, ax)
        vox[mask] = PhantomConfig.LUNG_LEVEL
        lung_masks.append(mask)
        lung_params.append((c, ax))

    noise = anatomy_rng.uniform(-PhantomConfig.NOISE_AMPLITUDE, PhantomConfig.NOISE_AMPLITUDE, size)
    vox += noise

    lesion_mask = np.zeros(size, dtype=bool)
    if label == 1:
        count = int(lesion_rng.integers(lo, hi + 1))
        placed = []
        for _ in range(count):
            peak = lesion_rng.uniform(*cfg.lesion_intensity)
            r = lesion_rng.uniform(*cfg.lesion_radius_range)
            radius_vox = (r, r, r)
            ok = False
            for _attempt in range(200):
                lung_idx = int(lesion_rng.integers(0, 2))
                lc, lax = lung_params[lung_idx]
                u = lesion_rng.uniform(-0.6, 0.6, size=3)
                center = tuple(lc[a] + u[a] * lax[a] for a in range(3))
                if not _lesion_fits(center, radius_vox, lc, lax, size):
                    continue
                center_vox = [center[a] * size[a] for a in range(3)]
                if any(
                    sum((center_vox[a] - p[0][a]) ** 2 for a in range(3)) ** 0.5
                    < (max(radius_vox) + max(p[1]) + 1.5)
                    for p in placed
                ):
                    continue
                ok = True
                break
            if not ok:
                raise InvalidConfig(
                    f"cannot place {count} lesions of radius ~{r:.1f} inside lungs of size {size}"
                )
            placed.append((center_vox, radius_vox))
            rho2 = np.zeros(size, dtype=np.float64)
            for a in range(3):
                pos = coords[a] * size[a]
                rho2 += ((pos - center_vox[a]) / radius_vox[a]) ** 2
            inside = rho2 <= 1.0
            # flat-top profile: near-peak core, dim rim at the mask boundary
            blob = peak * np.exp(-2.0 * rho2 * rho2)
            vox = np.where(inside, np.maximum(vox, blob), vox)
            lesion_mask |= inside

    vox = np.clip(vox, 0.0, 1.0).astype(np.float32)
    scan_id = f"scan-{int(cfg.seed):06d}"
    record = ScanRecord(scan_id=scan_id, label=label, path="")
    return CTVolume(vox, scan_id), record, lesion_mask


def generate_phantom(cfg: PhantomConfig, label: int) -> tuple[CTVolume, ScanRecord]:
    """Deterministic synthetic chest phantom; class 1 carries bright lesions."""
    volume, record, _ = generate_phantom_with_mask(cfg, label)
    return volume, record


def split_manifest(
    records: Sequence[ScanRecord], fractions: Sequence[float], seed: int
) -> tuple[list[ScanRecord], list[ScanRecord]]:
    """Split records into disjoint, exhaustive, per-class stratified (train, val) lists."""
    if len(fractions) != 2 or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidArgument(f"fractions must be two values summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[ScanRecord]] = {}
    for rec in records:
        by_class.setdefault(rec.label, []).append(rec)
    train: list[ScanRecord] = []
    val: list[ScanRecord] = []
    for label in sorted(by_class):
        group = sorted(by_class[label], key=lambda r: r.scan_id)
        if len(group) < 2:
            raise StratificationError(f"class {label} has {len(group)} record(s), need >= 2")
        order = rng.permutation(len(group))
        n_train = int(fractions[0] * len(group) + 0.5)
        n_train = min(max(n_train, 1), len(group) - 1)
        for i, idx in enumerate(order):
            (train if i < n_train else val).append(group[idx])
    train.sort(key=lambda r: r.scan_id)
    val.sort(key=lambda r: r.scan_id)
    return train, val


def read_labels_csv(path: Path | str, data_root: Path | str) -> list[ScanRecord]:
    """Read ``labels.csv`` (header scan_id,label) into records rooted at data_root."""
    path = Path(path)
    if not path.exists():
        raise NotFound(f"labels file does not exist: {path}")
    root = Path(data_root)
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["scan_id", "label"]:
            raise MalformedScan(f"labels.csv must have header scan_id,label, got {reader.fieldnames}")
        for row in reader:
            records.append(
                ScanRecord(row["scan_id"], int(row["label"]), str(root / row["scan_id"]))
            )
    seen = set()
    for rec in records:
        if rec.scan_id in seen:
            raise MalformedScan(f"duplicate scan_id in labels.csv: {rec.scan_id}")
        seen.add(rec.scan_id)
    return records


def write_manifest(path: Path | str, splits: dict[str, Sequence[ScanRecord]]) -> None:
    """Write ``scan_id,label,split`` rows, split blocks in sorted order."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scan_id", "label", "split"])
        for split in sorted(splits):
            for rec in splits[split]:
                writer.writerow([rec.scan_id, rec.label, split])


def read_manifest(path: Path | str, data_root: Path | str) -> dict[str, list[ScanRecord]]:
    """Read a manifest written by :func:`write_manifest`, keyed by split name."""
    path = Path(path)
    if not path.exists():
        raise NotFound(f"manifest does not exist: {path}")
    root = Path(data_root)
    splits: dict[str, list[ScanRecord]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["scan_id", "label", "split"]:
            raise MalformedScan(f"manifest header must be scan_id,label,split, got {reader.fieldnames}")
        for row in reader:
            rec = ScanRecord(row["scan_id"], int(row["label"]), str(root / row["scan_id"]))
            splits.setdefault(row["split"], []).append(rec)
    return splits


def synthesize_dataset(
    out_dir: Path | str,
    n_scans: int,
    cfg: PhantomConfig,
    class_balance: float = 0.5,
    split_fractions: Sequence[float] = (0.8, 0.2),
    split_seed: int = 0,
    force: bool = False,
) -> dict:
    """Write a phantom dataset: slice PNGs, labels.csv, manifest.csv, lesion masks.

    Scan seeds run cfg.seed .. cfg.seed+n_scans-1 with labels alternating at
    the requested balance, so reruns with the same arguments are
    byte-identical. Refuses to write into a non-empty directory unless
    ``force`` is set.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise Refused(f"output directory {out} is not empty (use force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)

    n_positive = int(n_scans * class_balance + 0.5)
    labels = [1 if i < n_positive else 0 for i in range(n_scans)]
    # interleave deterministically so seeds do not correlate with class
    order = np.random.default_rng(cfg.seed).permutation(n_scans)
    records = []
    for i in range(n_scans):
        label = labels[order[i]]
        scan_cfg = replace(cfg, seed=cfg.seed + i)
        volume, record, mask = generate_phantom_with_mask(scan_cfg, label)
        scan_dir = out / record.scan_id
        scan_dir.mkdir(exist_ok=True)
        data = np.rint(volume.voxels * 255.0).astype(np.uint8)
        for t in range(data.shape[0]):
            Image.fromarray(data[t], mode="L").save(scan_dir / f"{t:04d}.png")
        np.save(out / "masks" / f"{record.scan_id}.npy", mask)
        records.append(ScanRecord(record.scan_id, label, str(scan_dir)))

    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scan_id", "label"])
        for rec in records:
            writer.writerow([rec.scan_id, rec.label])

    train, val = split_manifest(records, split_fractions, split_seed)
    write_manifest(out / "manifest.csv", {"train": train, "val": val})
    return {
        "out_dir": str(out),
        "n_scans": n_scans,
        "n_positive": sum(labels),
        "labels_csv": str(out / "labels.csv"),
        "manifest": str(out / "manifest.csv"),
    }
