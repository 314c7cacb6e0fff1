"""Optimization loop: schedule, data-parallel step, checkpointing, resume.

Worker parallelism is logical: every worker forwards only its local samples,
builds the same global-batch loss with remote rows detached, and the
per-worker backward passes accumulate in rank order. The accumulated gradient
equals the single-process gradient of the global loss exactly, which is the
contract the equivalence tests pin down.

All stochasticity at epoch e is a pure function of (seed, e, step, slot), so
resuming from the last epoch checkpoint reproduces the uninterrupted run.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentationPolicy, make_views
from .checkpoint import load_checkpoint, model_state_numpy, save_checkpoint
from .errors import InvalidArgument, TrainingDiverged
from .evaluation import evaluate_model
from .losses import BatchEmbedding, one_hot, total_loss
from .mixing import MODE_HYBRID, SampleBatch, gather_dispatch
from .modeling import EncoderConfig, build_model
from .volumes import CTVolume, ScanRecord, load_scan, resize_volume

# seed-stream tags so independent draws never share a stream
_STREAM_ORDER = 101
_STREAM_VIEWS = 202


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    base_lr: float = 1e-4
    weight_decay: float = 1e-5
    lr_drop_points: tuple[float, ...] = (0.3, 0.8)
    lr_drop_factor: float = 10.0
    optimizer: str = "adam"
    decoupled_weight_decay: bool = False
    seed: int = 0
    workers: int = 1
    local_batch: int = 1
    tau: float = 0.1
    alpha: float = 0.2
    mix_mode: str = MODE_HYBRID
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    supcon_count_mode: str = "views"

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidArgument(f"epochs must be >= 1, got {self.epochs}")
        points = tuple(self.lr_drop_points)
        if any(not (0.0 < p < 1.0) for p in points) or list(points) != sorted(points):
            raise InvalidArgument(f"lr_drop_points must be sorted fractions in (0,1): {points}")
        if self.optimizer != "adam":
            raise InvalidArgument(f"unsupported optimizer {self.optimizer!r}")
        if self.workers < 1 or self.local_batch < 1:
            raise InvalidArgument("workers and local_batch must be >= 1")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Piecewise-constant schedule: divide by the drop factor at each fraction."""
    if not (0 <= epoch < cfg.epochs):
        raise InvalidArgument(f"epoch {epoch} outside 0..{cfg.epochs - 1}")
    drops = sum(1 for p in cfg.lr_drop_points if epoch + 1e-9 >= p * cfg.epochs)
    return cfg.base_lr / (cfg.lr_drop_factor**drops)


def build_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    cls = torch.optim.AdamW if cfg.decoupled_weight_decay else torch.optim.Adam
    return cls(
        model.parameters(),
        lr=cfg.base_lr,
        betas=(0.9, 0.999),
        eps=1e-8,
        weight_decay=cfg.weight_decay,
    )


def epoch_schedule(
    scan_ids: list[str], seed: int, epoch: int, workers: int, local_batch: int
) -> list[list[list[str]]]:
    """Seeded permutation chunked into steps x workers x local scans.

    Every id appears exactly once per epoch. With more than one worker the
    id count must divide evenly into global batches so local sizes stay equal
    (the gather protocol rejects ragged worker batches).
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, _STREAM_ORDER, epoch)))
    order = [scan_ids[i] for i in rng.permutation(len(scan_ids))]
    global_batch = workers * local_batch
    if workers > 1 and len(order) % global_batch != 0:
        raise InvalidArgument(
            f"{len(order)} training scans do not divide into {workers} workers x {local_batch}"
        )
    steps = []
    for start in range(0, len(order), global_batch):
        chunk = order[start : start + global_batch]
        per_worker = max(1, math.ceil(len(chunk) / workers))
        steps.append([chunk[w * per_worker : (w + 1) * per_worker] for w in range(workers)])
    return steps


class VolumeStore:
    """Loads scans once and caches them resized to the policy base shape."""

    def __init__(self, records: list[ScanRecord], base_shape: tuple[int, int, int]):
        self._records = {r.scan_id: r for r in records}
        self._base_shape = tuple(base_shape)
        self._cache: dict[str, CTVolume] = {}

    def get(self, scan_id: str) -> CTVolume:
        if scan_id not in self._cache:
            raw = load_scan(self._records[scan_id])
            self._cache[scan_id] = resize_volume(raw, self._base_shape)
        return self._cache[scan_id]

    def record(self, scan_id: str) -> ScanRecord:
        return self._records[scan_id]


def _views_batch(
    store: VolumeStore,
    scan_ids: list[str],
    policy: AugmentationPolicy,
    seed: int,
    epoch: int,
    step: int,
    slot_offset: int,
) -> tuple[SampleBatch, np.ndarray]:
    """Two augmented views per scan as a SampleBatch plus int labels."""
    volumes, labels = [], []
    for slot, scan_id in enumerate(scan_ids):
        record = store.record(scan_id)
        rng = np.random.default_rng(
            np.random.SeedSequence((seed, _STREAM_VIEWS, epoch, step, slot_offset + slot))
        )
        pair = make_views(store.get(scan_id), record.label, policy, rng)
        volumes.extend([pair.view_a.voxels, pair.view_b.voxels])
        labels.extend([record.label, record.label])
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros((len(labels), 2), dtype=np.float32)
    onehot[np.arange(len(labels)), labels] = 1.0
    return SampleBatch(np.stack(volumes), onehot), labels


def train_step(
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer,
    worker_views: list[SampleBatch],
    worker_labels: list[np.ndarray],
    seed_tuple: tuple[int, int, int],
    cfg: TrainConfig,
    lr: float,
):
    """One synchronized update over all workers; returns the loss report.

    Per worker: 2*local_batch raw views plus 2*local_batch mixed samples are
    forwarded; the shared global-batch loss is backpropagated through the
    local rows only, and rank-ordered gradient accumulation reproduces the
    single-process gradient.
    """
    mixed = gather_dispatch(worker_views, seed_tuple, cfg.alpha, mode=cfg.mix_mode)
    dtype = next(model.parameters()).dtype
    world = len(worker_views)

    outputs = []
    for w in range(world):
        raw_x = torch.from_numpy(worker_views[w].volumes).to(dtype)
        mix_x = torch.from_numpy(mixed[w].mixed_volumes).to(dtype)
        r, z, logits = model(raw_x)
        mixed_logits = model.classify(model.encode(mix_x))
        if not (torch.isfinite(logits).all() and torch.isfinite(mixed_logits).all()):
            raise TrainingDiverged(
                "non-finite logits during forward pass",
                diagnostics={
                    "seed_tuple": seed_tuple,
                    "worker": w,
                    "lr": lr,
                    "raw_finite": bool(torch.isfinite(logits).all()),
                    "mixed_finite": bool(torch.isfinite(mixed_logits).all()),
                },
            )
        outputs.append(
            {
                "z": z,
                "r": r,
                "logits": logits,
                "mixed_logits": mixed_logits,
                "labels": torch.from_numpy(worker_labels[w]),
                "soft": torch.from_numpy(mixed[w].mixed_labels).to(dtype),
            }
        )

    labels_all = torch.cat([o["labels"] for o in outputs])
    soft_all = torch.cat([o["soft"] for o in outputs])

    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad()
    report = None
    for w in range(world):
        z_all = torch.cat([o["z"] if i == w else o["z"].detach() for i, o in enumerate(outputs)])
        r_all = torch.cat([o["r"] if i == w else o["r"].detach() for i, o in enumerate(outputs)])
        logits_all = torch.cat(
            [o["logits"] if i == w else o["logits"].detach() for i, o in enumerate(outputs)]
        )
        mixed_all = torch.cat(
            [o["mixed_logits"] if i == w else o["mixed_logits"].detach() for i, o in enumerate(outputs)]
        )
        worker_report = total_loss(
            BatchEmbedding(z=z_all, r=r_all, logits=logits_all, labels=labels_all),
            mixed_all,
            soft_all,
            tau=cfg.tau,
            weights=cfg.loss_weights,
            count_mode=cfg.supcon_count_mode,
        )
        if not math.isfinite(worker_report.l_total):
            raise TrainingDiverged(
                "loss is not finite",
                diagnostics={
                    "seed_tuple": seed_tuple,
                    "worker": w,
                    "l_con": worker_report.l_con,
                    "l_mix": worker_report.l_mix,
                    "l_clf": worker_report.l_clf,
                },
            )
        worker_report.total.backward()
        if report is None:
            report = worker_report
    optimizer.step()
    return report


HISTORY_HEADER = [
    "epoch", "lr", "l_con", "l_mix", "l_clf", "l_total",
    "val_macro_f1", "val_f1_0", "val_f1_1",
]


def _format_row(row: dict) -> list[str]:
    return [
        str(row["epoch"]),
        *(f"{float(row[k]):.12g}" for k in HISTORY_HEADER[1:]),
    ]


def _append_history_row(path: Path, row: dict) -> None:
    new_file = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(HISTORY_HEADER)
        writer.writerow(_format_row(row))


def _truncate_history(path: Path, max_epoch: int) -> None:
    # byte-level truncation keeps the retained rows identical
    lines = path.read_bytes().splitlines(keepends=True)
    kept = lines[:1]
    for line in lines[1:]:
        epoch_field = line.split(b",", 1)[0]
        if epoch_field and int(epoch_field) <= max_epoch:
            kept.append(line)
    path.write_bytes(b"".join(kept))


def read_history(path: Path | str) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            {k: (int(row[k]) if k == "epoch" else float(row[k])) for k in HISTORY_HEADER}
            for row in reader
        ]


def _save_state(
    path: Path,
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer,
    meta: dict,
) -> None:
    tensors = model_state_numpy(model, prefix="model.")
    opt_state = optimizer.state_dict()
    for idx, state in opt_state["state"].items():
        for key, value in state.items():
            arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
            tensors[f"optim.{idx}.{key}"] = arr
    save_checkpoint(path, tensors, meta)


def load_model_from_checkpoint(path: Path | str) -> tuple[torch.nn.Module, dict]:
    """Rebuild a model from a training checkpoint's stored encoder config."""
    tensors, meta = load_checkpoint(path)
    cfg = EncoderConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["encoder"].items()})
    model = build_model(cfg)
    state = {
        name[len("model.") :]: torch.from_numpy(arr)
        for name, arr in tensors.items()
        if name.startswith("model.")
    }
    model.load_state_dict(state)
    return model, meta


def _restore_optimizer(optimizer: torch.optim.Optimizer, tensors: dict[str, np.ndarray]) -> None:
    groups = optimizer.state_dict()["param_groups"]
    state: dict[int, dict] = {}
    for name, arr in tensors.items():
        if not name.startswith("optim."):
            continue
        _, idx, key = name.split(".", 2)
        entry = state.setdefault(int(idx), {})
        entry[key] = torch.from_numpy(arr.copy())
    optimizer.load_state_dict({"state": state, "param_groups": groups})


@dataclass
class TrainResult:
    history: list[dict]
    best_checkpoint: str
    last_checkpoint: str
    history_csv: str
    best_val_macro_f1: float
    epochs_run: int = 0


def run_training(
    cfg: TrainConfig,
    encoder_cfg: EncoderConfig,
    policy: AugmentationPolicy,
    train_records: list[ScanRecord],
    val_records: list[ScanRecord],
    out_dir: Path | str,
    config_hash: str = "",
    resume: bool = False,
    stop_after: int | None = None,
) -> TrainResult:
    """Train to completion, keeping last/best checkpoints and a metric CSV.

    ``stop_after`` caps the epochs run in this session (checkpoint and
    return early); a later ``resume=True`` call continues the schedule.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    last_path = out / "last.ckpt"
    best_path = out / "best.ckpt"
    history_path = out / "history.csv"

    store = VolumeStore(train_records + val_records, policy.base_shape)
    train_ids = sorted(r.scan_id for r in train_records)
    encoder_meta = {
        "backbone": encoder_cfg.backbone,
        "stage_depths": list(encoder_cfg.stage_depths),
        "channels": list(encoder_cfg.channels),
        "attention_heads": encoder_cfg.attention_heads,
        "global_stage_start": encoder_cfg.global_stage_start,
        "d_e": encoder_cfg.d_e,
        "d_p": encoder_cfg.d_p,
        "proj_hidden": encoder_cfg.proj_hidden,
    }

    model = build_model(encoder_cfg, seed=cfg.seed)
    optimizer = build_optimizer(model, cfg)
    start_epoch = 0
    best_f1 = -1.0
    history: list[dict] = []

    if resume and last_path.exists():
        tensors, meta = load_checkpoint(last_path)
        model.load_state_dict(
            {n[len("model.") :]: torch.from_numpy(a) for n, a in tensors.items() if n.startswith("model.")}
        )
        _restore_optimizer(optimizer, tensors)
        start_epoch = int(meta["epoch"]) + 1
        best_f1 = float(meta.get("best_val_macro_f1", -1.0))
        if history_path.exists():
            _truncate_history(history_path, int(meta["epoch"]))
            history = read_history(history_path)
    elif history_path.exists():
        history_path.unlink()

    end_epoch = cfg.epochs
    if stop_after is not None:
        end_epoch = min(cfg.epochs, start_epoch + stop_after)
    for epoch in range(start_epoch, end_epoch):
        lr = lr_at(epoch, cfg)
        schedule = epoch_schedule(train_ids, cfg.seed, epoch, cfg.workers, cfg.local_batch)
        sums = {"l_con": 0.0, "l_mix": 0.0, "l_clf": 0.0, "l_total": 0.0}
        model.train()
        for step, worker_ids in enumerate(schedule):
            worker_views, worker_labels = [], []
            for w, ids in enumerate(worker_ids):
                batch, labels = _views_batch(
                    store, ids, policy, cfg.seed, epoch, step, slot_offset=w * cfg.local_batch
                )
                worker_views.append(batch)
                worker_labels.append(labels)
            report = train_step(
                model, optimizer, worker_views, worker_labels,
                (cfg.seed, epoch, step), cfg, lr,
            )
            for key in sums:
                sums[key] += getattr(report, key)

        report, _ = evaluate_model(model, val_records, lambda r: store.get(r.scan_id), policy)
        row = {
            "epoch": epoch,
            "lr": lr,
            **{k: v / max(len(schedule), 1) for k, v in sums.items()},
            "val_macro_f1": report.macro_f1,
            "val_f1_0": report.f1_per_class[0],
            "val_f1_1": report.f1_per_class[1],
        }
        history.append(row)
        _append_history_row(history_path, row)

        meta = {
            "epoch": epoch,
            "config_hash": config_hash,
            "encoder": encoder_meta,
            "seed": cfg.seed,
            "val_macro_f1": report.macro_f1,
            "best_val_macro_f1": max(best_f1, report.macro_f1),
        }
        _save_state(last_path, model, optimizer, meta)
        if report.macro_f1 > best_f1:
            best_f1 = report.macro_f1
            _save_state(best_path, model, optimizer, meta)

    return TrainResult(
        history=history,
        best_checkpoint=str(best_path),
        last_checkpoint=str(last_path),
        history_csv=str(history_path),
        best_val_macro_f1=best_f1,
        epochs_run=end_epoch - start_epoch,
    )
