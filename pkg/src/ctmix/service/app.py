"""FastAPI service wrapping the training/evaluation pipeline.

Every endpoint resolves a run config server-side (path + dotted overrides),
executes synchronously, and returns file paths plus key numbers. The CLI is
a thin client of these endpoints.
"""

from __future__ import annotations

import csv
import os
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__
from ..config import (
    RunConfig,
    config_hash,
    load_config,
    to_encoder,
    to_phantom,
    to_policy,
    to_train,
    validate_components,
)
from ..augment import eval_transform
from ..errors import CTMixError, InvalidArgument, NotFound, Refused
from ..evaluation import (
    compute_cam,
    ensemble_predict,
    evaluate_model,
    f1_scores,
    predict_plain,
    predict_tta,
    roc_auc,
    write_cam_overlays,
    write_eval_report,
)
from ..training import VolumeStore, load_model_from_checkpoint, run_training
from ..volumes import read_manifest, synthesize_dataset
from . import schemas

DATA_ROOT_ENV = "CMC_DATA_ROOT"


def _http_error(exc: CTMixError) -> HTTPException:
    if isinstance(exc, NotFound):
        return HTTPException(status_code=404, detail=str(exc))
    if isinstance(exc, Refused):
        return HTTPException(status_code=409, detail=str(exc))
    return HTTPException(status_code=400, detail=str(exc))


def _resolve_config(req: schemas.ConfiguredRequest) -> tuple[RunConfig, str]:
    overrides = list(req.set)
    if req.seed is not None:
        overrides.append(f"train.seed={req.seed}")
    if req.workers is not None:
        overrides.append(f"train.workers={req.workers}")
    cfg = load_config(req.config, overrides)
    validate_components(cfg)
    return cfg, config_hash(cfg)


def _data_root(cfg: RunConfig, requested: str | None) -> Path:
    root = requested or cfg.data.root or os.environ.get(DATA_ROOT_ENV, "")
    if not root:
        raise InvalidArgument(
            f"no dataset root: pass data_root, set data.root, or export {DATA_ROOT_ENV}"
        )
    return Path(root)


def _manifest_splits(cfg: RunConfig, root: Path) -> dict:
    manifest = Path(cfg.data.manifest)
    if not manifest.is_absolute():
        manifest = root / manifest
    return read_manifest(manifest, root)


def _records_for(req, cfg: RunConfig, root: Path):
    splits = _manifest_splits(cfg, root)
    if getattr(req, "scan_ids", None):
        by_id = {r.scan_id: r for split in splits.values() for r in split}
        missing = [sid for sid in req.scan_ids if sid not in by_id]
        if missing:
            raise NotFound(f"scan ids not in manifest: {missing}")
        return [by_id[sid] for sid in req.scan_ids]
    split = getattr(req, "split", None) or "val"
    if split not in splits:
        raise NotFound(f"split {split!r} not in manifest (has {sorted(splits)})")
    return splits[split]


def create_app() -> FastAPI:
    app = FastAPI(
        title="ctmix",
        description="Volumetric CT classification: contrastive two-view training "
        "with hybrid mixup/cutmix, evaluation, TTA/ensembling, and CAM heatmaps.",
        version=__version__,
    )

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", service="ctmix", version=__version__)

    @app.post("/datasets/synthesize", response_model=schemas.SynthResponse)
    def synthesize(req: schemas.SynthRequest):
        try:
            cfg, digest = _resolve_config(req)
            info = synthesize_dataset(
                req.out_dir,
                cfg.phantom.n_scans,
                to_phantom(cfg),
                class_balance=cfg.phantom.class_balance,
                split_fractions=cfg.phantom.split_fractions,
                split_seed=cfg.phantom.split_seed,
                force=req.force,
            )
        except CTMixError as exc:
            raise _http_error(exc)
        return schemas.SynthResponse(config_hash=digest, **info)

    @app.post("/train", response_model=schemas.TrainResponse)
    def train(req: schemas.TrainRequest):
        try:
            cfg, digest = _resolve_config(req)
            root = _data_root(cfg, req.data_root)
            splits = _manifest_splits(cfg, root)
            if "train" not in splits or "val" not in splits:
                raise NotFound(f"manifest must contain train and val splits, has {sorted(splits)}")
            result = run_training(
                to_train(cfg),
                to_encoder(cfg),
                to_policy(cfg),
                splits["train"],
                splits["val"],
                req.out_dir,
                config_hash=digest,
                resume=req.resume,
                stop_after=req.stop_after,
            )
        except CTMixError as exc:
            raise _http_error(exc)
        return schemas.TrainResponse(
            history=[schemas.HistoryRow(**row) for row in result.history],
            best_checkpoint=result.best_checkpoint,
            last_checkpoint=result.last_checkpoint,
            history_csv=result.history_csv,
            best_val_macro_f1=result.best_val_macro_f1,
            epochs_run=result.epochs_run,
            config_hash=digest,
        )

    def _eval_common(req, models, cfg: RunConfig, digest: str):
        root = _data_root(cfg, req.data_root)
        records = _records_for(req, cfg, root)
        policy = to_policy(cfg)
        store = VolumeStore(records, policy.base_shape)
        if len(models) == 1:
            report, _ = evaluate_model(
                models[0], records, lambda r: store.get(r.scan_id), policy,
                tta_views=req.tta, batch_size=cfg.eval.batch_size, seed=cfg.train.seed,
            )
        else:
            probs = np.stack(
                [
                    ensemble_predict(models, store.get(r.scan_id), policy,
                                     tta_views=req.tta, seed=cfg.train.seed)
                    for r in records
                ]
            )
            labels = np.array([r.label for r in records])
            report = f1_scores(probs.argmax(axis=1), labels)
            if len(np.unique(labels)) == 2:
                curves, aucs = roc_auc(probs, labels)
                report.auc_per_class = aucs
                report.roc_points = curves
        files = {}
        if req.out_dir:
            files = write_eval_report(report, req.out_dir, config_hash=digest)
        return schemas.EvalResponse(
            f1_per_class=list(report.f1_per_class),
            macro_f1=report.macro_f1,
            auc_per_class=list(report.auc_per_class) if report.auc_per_class else None,
            confusion=report.confusion,
            n_samples=report.n_samples,
            files=files,
            config_hash=digest,
        )

    @app.post("/evaluate", response_model=schemas.EvalResponse)
    def evaluate(req: schemas.EvalRequest):
        try:
            cfg, digest = _resolve_config(req)
            model, _ = load_model_from_checkpoint(req.checkpoint)
            return _eval_common(req, [model], cfg, digest)
        except CTMixError as exc:
            raise _http_error(exc)

    @app.post("/evaluate/ensemble", response_model=schemas.EvalResponse)
    def evaluate_ensemble(req: schemas.EnsembleEvalRequest):
        try:
            cfg, digest = _resolve_config(req)
            models = [load_model_from_checkpoint(path)[0] for path in req.checkpoints]
            return _eval_common(req, models, cfg, digest)
        except CTMixError as exc:
            raise _http_error(exc)

    @app.post("/predict", response_model=schemas.PredictResponse)
    def predict(req: schemas.PredictRequest):
        try:
            cfg, digest = _resolve_config(req)
            root = _data_root(cfg, req.data_root)
            records = _records_for(req, cfg, root)
            policy = to_policy(cfg)
            store = VolumeStore(records, policy.base_shape)
            model, _ = load_model_from_checkpoint(req.checkpoint)
            rows = []
            for rec in records:
                vol = store.get(rec.scan_id)
                if req.tta > 0:
                    probs = predict_tta(model, vol, policy, req.tta, seed=cfg.train.seed)
                else:
                    probs = predict_plain(model, vol, policy)
                rows.append(
                    schemas.PredictRow(
                        scan_id=rec.scan_id, p_class0=float(probs[0]), p_class1=float(probs[1])
                    )
                )
            csv_path = None
            if req.out_csv:
                csv_path = str(req.out_csv)
                Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
                with open(csv_path, "w", newline="") as fh:
                    writer = csv.writer(fh)
                    writer.writerow([f"# config_hash={digest}"])
                    writer.writerow(["scan_id", "p_class0", "p_class1"])
                    for row in rows:
                        writer.writerow([row.scan_id, f"{row.p_class0:.8f}", f"{row.p_class1:.8f}"])
        except CTMixError as exc:
            raise _http_error(exc)
        return schemas.PredictResponse(rows=rows, csv_path=csv_path, config_hash=digest)

    @app.post("/cam", response_model=schemas.CamResponse)
    def cam(req: schemas.CamRequest):
        try:
            cfg, digest = _resolve_config(req)
            root = _data_root(cfg, req.data_root)
            records = _records_for(req, cfg, root)
            if req.limit is not None:
                records = records[: req.limit]
            policy = to_policy(cfg)
            store = VolumeStore(records, policy.base_shape)
            model, _ = load_model_from_checkpoint(req.checkpoint)
            overlays = {}
            for rec in records:
                ready = eval_transform(store.get(rec.scan_id), policy)
                heat = compute_cam(model, ready, req.target_class)
                overlays[rec.scan_id] = write_cam_overlays(ready, heat, req.out_dir)
        except CTMixError as exc:
            raise _http_error(exc)
        return schemas.CamResponse(overlays=overlays, config_hash=digest)

    return app


app = create_app()
