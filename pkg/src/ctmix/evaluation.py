"""Metrics, test-time augmentation, checkpoint ensembling, and CAM heatmaps."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .augment import AugmentationPolicy, augment, eval_transform
from .errors import InvalidArgument, UndefinedMetric
from .volumes import CTVolume, resize_volume


@dataclass
class EvalReport:
    """Per-class F1, macro F1, optional ROC/AUC, and confusion counts."""

    f1_per_class: tuple[float, float]
    macro_f1: float
    confusion: list[list[int]]  # confusion[true][pred]
    n_samples: int
    auc_per_class: tuple[float, float] | None = None
    roc_points: dict[str, list[tuple[float, float]]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "f1_per_class": list(self.f1_per_class),
            "macro_f1": self.macro_f1,
            "confusion": self.confusion,
            "n_samples": self.n_samples,
        }
        if self.auc_per_class is not None:
            out["auc_per_class"] = list(self.auc_per_class)
        return out


def macro_f1(per_class) -> float:
    """Unweighted mean of per-class F1 values."""
    return float(np.mean(np.asarray(per_class, dtype=np.float64)))


def _f1_from_counts(tp: int, fp: int, fn: int) -> float:
    precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def f1_scores(predictions, labels) -> EvalReport:
    """Per-class F1 = 2PR/(P+R) with the zero-division-gives-0 convention."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.size == 0:
        raise InvalidArgument("cannot score an empty prediction set")
    if predictions.shape != labels.shape:
        raise InvalidArgument(
            f"predictions and labels differ in length: {predictions.shape} vs {labels.shape}"
        )
    if not np.isin(labels, (0, 1)).all() or not np.isin(predictions, (0, 1)).all():
        raise InvalidArgument("labels and predictions must be class indices in {0, 1}")
    confusion = [[0, 0], [0, 0]]
    for t, p in zip(labels, predictions):
        confusion[t][p] += 1
    per_class = []
    for c in (0, 1):
        tp = confusion[c][c]
        fp = confusion[1 - c][c]
        fn = confusion[c][1 - c]
        per_class.append(_f1_from_counts(tp, fp, fn))
    return EvalReport(
        f1_per_class=(per_class[0], per_class[1]),
        macro_f1=macro_f1(per_class),
        confusion=confusion,
        n_samples=int(predictions.size),
    )


def roc_curve_auc(scores, positives) -> tuple[list[tuple[float, float]], float]:
    """ROC points over descending unique thresholds and trapezoidal AUC.

    Tied scores collapse into one threshold step (diagonal segment), which
    integrates to the rank-averaging AUC.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = int((~positives).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("ROC needs both classes present")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_pos = positives[order]
    tps = np.cumsum(sorted_pos)
    fps = np.cumsum(~sorted_pos)
    # keep only the last index of each tied-score run
    distinct = np.r_[sorted_scores[1:] != sorted_scores[:-1], True]
    tpr = np.r_[0.0, tps[distinct] / n_pos]
    fpr = np.r_[0.0, fps[distinct] / n_neg]
    auc = float(np.trapezoid(tpr, fpr))
    return list(zip(fpr.tolist(), tpr.tolist())), auc


def roc_auc(probabilities, labels):
    """Class-wise ROC points and AUC from (N, 2) probability rows."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probabilities.ndim != 2 or probabilities.shape[1] != 2:
        raise InvalidArgument(f"expected (N, 2) probabilities, got {probabilities.shape}")
    if probabilities.min() < 0.0 or probabilities.max() > 1.0:
        raise InvalidArgument("probabilities must lie in [0, 1]")
    curves = {}
    aucs = []
    for c in (0, 1):
        points, auc = roc_curve_auc(probabilities[:, c], labels == c)
        curves[str(c)] = points
        aucs.append(auc)
    return curves, (aucs[0], aucs[1])


def _forward_probs(model, volumes: list[np.ndarray]) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(np.stack(volumes)).to(dtype)
    with torch.no_grad():
        r = model.encode(x)
        logits = model.classify(r)
        return torch.softmax(logits, dim=1).cpu().numpy()


def tta_policy(policy: AugmentationPolicy) -> AugmentationPolicy:
    """Test-time variant of the training policy with halved photometric ranges."""
    return replace(
        policy,
        brightness_jitter=policy.brightness_jitter / 2.0,
        contrast_jitter=policy.contrast_jitter / 2.0,
    )


def predict_tta(
    model,
    volume: CTVolume,
    policy: AugmentationPolicy,
    n_views: int = 1,
    seed: int = 0,
) -> np.ndarray:
    """Mean softmax over the deterministic eval view plus n_views augmented views."""
    if n_views < 1:
        raise InvalidArgument(f"n_views must be >= 1, got {n_views}")
    model.eval()
    views = [eval_transform(volume, policy).voxels]
    aug_policy = tta_policy(policy)
    base = resize_volume(volume, policy.base_shape)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 7)))
    for _ in range(n_views):
        views.append(augment(base, aug_policy, rng).voxels)
    # augmented views share the train resolution; the eval view may differ
    probs = [_forward_probs(model, [v])[0] for v in views]
    return np.mean(probs, axis=0)


def predict_plain(model, volume: CTVolume, policy: AugmentationPolicy) -> np.ndarray:
    """Single deterministic eval-transform forward pass."""
    model.eval()
    return _forward_probs(model, [eval_transform(volume, policy).voxels])[0]


def ensemble_predict(
    models,
    volume: CTVolume,
    policy: AugmentationPolicy,
    tta_views: int = 0,
    seed: int = 0,
) -> np.ndarray:
    """Unweighted mean of per-model probability vectors."""
    models = list(models)
    if not models:
        raise InvalidArgument("ensemble needs at least one model")
    probs = []
    for model in models:
        if tta_views > 0:
            probs.append(predict_tta(model, volume, policy, tta_views, seed=seed))
        else:
            probs.append(predict_plain(model, volume, policy))
    return np.mean(probs, axis=0)


def evaluate_model(
    model,
    records,
    loader,
    policy: AugmentationPolicy,
    tta_views: int = 0,
    batch_size: int = 8,
    seed: int = 0,
) -> tuple[EvalReport, dict[str, np.ndarray]]:
    """Score a model over records; ``loader(record) -> CTVolume``."""
    model.eval()
    labels = []
    prob_rows = {}
    if tta_views > 0:
        for rec in records:
            prob_rows[rec.scan_id] = predict_tta(model, loader(rec), policy, tta_views, seed=seed)
            labels.append(rec.label)
    else:
        pending = []
        for rec in records:
            pending.append((rec, eval_transform(loader(rec), policy).voxels))
            labels.append(rec.label)
        for i in range(0, len(pending), batch_size):
            chunk = pending[i : i + batch_size]
            probs = _forward_probs(model, [v for _, v in chunk])
            for (rec, _), p in zip(chunk, probs):
                prob_rows[rec.scan_id] = p
    probs = np.stack([prob_rows[r.scan_id] for r in records])
    labels = np.asarray(labels)
    report = f1_scores(probs.argmax(axis=1), labels)
    if len(np.unique(labels)) == 2:
        curves, aucs = roc_auc(probs, labels)
        report.auc_per_class = aucs
        report.roc_points = curves
    return report, prob_rows


# ---------------------------------------------------------------------------
# class activation maps
# ---------------------------------------------------------------------------


@dataclass
class CAMVolume:
    """Class-evidence heatmap normalized to [0, 1] at the input resolution."""

    heatmap: np.ndarray
    target_class: int


def cam_from_grid(grid: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Positive part of the classifier-weighted channel sum of a feature grid."""
    grid = np.asarray(grid, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if grid.ndim != 4 or len(weights) != grid.shape[0]:
        raise InvalidArgument(
            f"grid must be (C,t,h,w) with matching weights, got {grid.shape} and {weights.shape}"
        )
    return np.maximum(np.tensordot(weights, grid, axes=1), 0.0)


def normalize_heatmap(raw: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; constant maps collapse to all-zero."""
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo <= 0.0:
        return np.zeros_like(raw, dtype=np.float32)
    return ((raw - lo) / (hi - lo)).astype(np.float32)


def compute_cam(model, volume: CTVolume, target_class: int) -> CAMVolume:
    """Heatmap over a model-ready volume for one class, at input resolution."""
    if target_class not in (0, 1):
        raise InvalidArgument(f"target_class must be 0 or 1, got {target_class}")
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(volume.voxels[None]).to(dtype)
    with torch.no_grad():
        grid = model.encoder.forward_grid(x)[0].cpu().numpy()
    weights = model.classifier.weight.detach().cpu().numpy()[target_class]
    raw = cam_from_grid(grid, weights)
    up = F.interpolate(
        torch.from_numpy(raw[None, None].astype(np.float32)),
        size=volume.shape,
        mode="trilinear",
        align_corners=False,
    )[0, 0].numpy()
    return CAMVolume(heatmap=normalize_heatmap(up), target_class=target_class)


_FIRE_ANCHORS = np.array(
    [
        (0.00, 0.0, 0.0, 0.0),
        (0.25, 0.6, 0.0, 0.0),
        (0.50, 1.0, 0.35, 0.0),
        (0.75, 1.0, 0.75, 0.0),
        (1.00, 1.0, 1.0, 0.9),
    ]
)


def _fire_colormap(values: np.ndarray) -> np.ndarray:
    """Black -> red -> orange -> yellow -> near-white ramp, (..., 3) floats."""
    stops = _FIRE_ANCHORS[:, 0]
    return np.stack(
        [np.interp(values, stops, _FIRE_ANCHORS[:, c]) for c in (1, 2, 3)], axis=-1
    )


def write_cam_overlays(
    volume: CTVolume, cam: CAMVolume, out_dir: Path | str, alpha: float = 0.4
) -> list[str]:
    """Write per-slice overlay PNGs `<out_dir>/<scan_id>/cam_<idx>.png`."""
    scan_dir = Path(out_dir) / volume.scan_id
    scan_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for idx in range(volume.shape[0]):
        base = np.repeat(volume.voxels[idx][..., None], 3, axis=-1)
        heat = _fire_colormap(cam.heatmap[idx])
        blended = np.clip((1.0 - alpha) * base + alpha * heat, 0.0, 1.0)
        img = Image.fromarray(np.rint(blended * 255.0).astype(np.uint8), mode="RGB")
        path = scan_dir / f"cam_{idx:04d}.png"
        img.save(path)
        paths.append(str(path))
    return paths


def write_eval_report(report: EvalReport, out_dir: Path | str, config_hash: str = "") -> dict:
    """Serialize the report as JSON plus per-class ROC point CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    if config_hash:
        payload["config_hash"] = config_hash
    report_path = out / "eval_report.json"
    report_path.write_text(json.dumps(payload, indent=2) + "\n")
    written = {"report": str(report_path)}
    for cls, points in report.roc_points.items():
        roc_path = out / f"roc_class{cls}.csv"
        with open(roc_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fpr", "tpr"])
            writer.writerows(points)
        written[f"roc_class{cls}"] = str(roc_path)
    return written
