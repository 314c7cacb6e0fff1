"""Pydantic request/response models for the pipeline service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str = Field(..., description="Service health status")
    service: str = Field(..., description="Service name")
    version: str = Field(..., description="Package version")


class ConfiguredRequest(BaseModel):
    """Base for requests that resolve a run config server-side."""

    config: str | None = Field(default=None, description="Path to a YAML run config")
    set: list[str] = Field(default_factory=list, description="Dotted key=value overrides")
    seed: int | None = Field(default=None, description="Shortcut for train.seed")
    workers: int | None = Field(default=None, description="Shortcut for train.workers")


class SynthRequest(ConfiguredRequest):
    out_dir: str = Field(..., description="Directory to write the phantom dataset into")
    force: bool = Field(default=False, description="Overwrite a non-empty directory")


class SynthResponse(BaseModel):
    out_dir: str
    n_scans: int
    n_positive: int
    labels_csv: str
    manifest: str
    config_hash: str


class TrainRequest(ConfiguredRequest):
    data_root: str | None = Field(default=None, description="Dataset root (defaults to CMC_DATA_ROOT)")
    out_dir: str = Field(..., description="Directory for checkpoints and the metric history")
    resume: bool = Field(default=False, description="Continue from the last epoch checkpoint")
    stop_after: int | None = Field(default=None, description="Cap epochs run this session")


class HistoryRow(BaseModel):
    epoch: int
    lr: float
    l_con: float
    l_mix: float
    l_clf: float
    l_total: float
    val_macro_f1: float
    val_f1_0: float
    val_f1_1: float


class TrainResponse(BaseModel):
    history: list[HistoryRow]
    best_checkpoint: str
    last_checkpoint: str
    history_csv: str
    best_val_macro_f1: float
    epochs_run: int
    config_hash: str


class EvalRequest(ConfiguredRequest):
    checkpoint: str = Field(..., description="Checkpoint blob to evaluate")
    data_root: str | None = None
    split: str = Field(default="val", description="Manifest split to score")
    tta: int = Field(default=0, ge=0, description="Stochastic TTA views (0 = plain eval)")
    out_dir: str | None = Field(default=None, description="Where to write the report files")


class EvalResponse(BaseModel):
    f1_per_class: list[float]
    macro_f1: float
    auc_per_class: list[float] | None
    confusion: list[list[int]]
    n_samples: int
    files: dict[str, str] = Field(default_factory=dict)
    config_hash: str


class PredictRequest(ConfiguredRequest):
    checkpoint: str
    data_root: str | None = None
    split: str | None = Field(default=None, description="Score a whole split ...")
    scan_ids: list[str] = Field(default_factory=list, description="... or specific scans")
    tta: int = Field(default=0, ge=0)
    out_csv: str | None = Field(default=None, description="Optional probability CSV path")


class PredictRow(BaseModel):
    scan_id: str
    p_class0: float
    p_class1: float


class PredictResponse(BaseModel):
    rows: list[PredictRow]
    csv_path: str | None
    config_hash: str


class CamRequest(ConfiguredRequest):
    checkpoint: str
    out_dir: str
    data_root: str | None = None
    scan_ids: list[str] = Field(default_factory=list, description="Defaults to the val split")
    target_class: int = Field(default=1, ge=0, le=1)
    limit: int | None = Field(default=None, description="Cap the number of scans rendered")


class CamResponse(BaseModel):
    overlays: dict[str, list[str]] = Field(description="scan_id -> overlay image paths")
    config_hash: str


class EnsembleEvalRequest(ConfiguredRequest):
    checkpoints: list[str] = Field(..., min_length=1)
    data_root: str | None = None
    split: str = "val"
    tta: int = Field(default=0, ge=0)
    out_dir: str | None = None


class ServeError(BaseModel):
    detail: str
