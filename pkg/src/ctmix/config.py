"""Run configuration: schema-validated YAML with dotted-key overrides.

One file carries every module's knobs. Unknown keys are rejected up front,
and the canonical-JSON hash of the resolved config is stamped into every
artifact a run produces.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError

from .augment import AugmentationPolicy
from .errors import InvalidConfig, NotFound
from .modeling import EncoderConfig
from .training import TrainConfig
from .volumes import PhantomConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Section):
    root: str = ""
    manifest: str = "manifest.csv"


class PhantomSection(_Section):
    size: tuple[int, int, int] = (16, 64, 64)
    n_scans: int = 200
    class_balance: float = 0.5
    lesion_count_range: tuple[int, int] = (1, 2)
    lesion_intensity: tuple[float, float] = (0.75, 0.95)
    lesion_radius_range: tuple[float, float] = (2.8, 3.8)
    seed: int = 0
    split_fractions: tuple[float, float] = (0.8, 0.2)
    split_seed: int = 0


class PolicySection(_Section):
    mode: str = "volume3d"
    base_shape: tuple[int, int, int] = (128, 224, 224)
    crop_scale_range: tuple[float, float] = (0.7, 1.0)
    depth_crop: int = 64
    rotation_degrees: tuple[float, float] = (-10.0, 10.0)
    brightness_jitter: float = 0.2
    contrast_jitter: float = 0.2
    train_resolution: int = 192
    eval_resolution: int = 224


class EncoderSection(_Section):
    backbone: str = "hybrid_transformer"
    stage_depths: tuple[int, int, int, int] = (2, 2, 4, 2)
    channels: tuple[int, int, int, int] = (32, 64, 128, 256)
    attention_heads: int = 4
    global_stage_start: int = 3
    d_e: int = 256
    d_p: int = 128
    proj_hidden: int | None = None


class MixingSection(_Section):
    mode: str = "hybrid"  # "hybrid" or "mixup"
    alpha: float = 0.2


class LossSection(_Section):
    tau: float = 0.1
    count_mode: str = "views"  # or "batch"
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)


class TrainSection(_Section):
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


class EvalSection(_Section):
    tta_views: int = 0
    batch_size: int = 8


class RunConfig(_Section):
    data: DataSection = DataSection()
    phantom: PhantomSection = PhantomSection()
    policy: PolicySection = PolicySection()
    encoder: EncoderSection = EncoderSection()
    mixing: MixingSection = MixingSection()
    loss: LossSection = LossSection()
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()


def _set_dotted(tree: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise InvalidConfig(f"override path {dotted!r} crosses a non-section key")
    node[parts[-1]] = value


def apply_overrides(tree: dict, overrides) -> dict:
    """Apply ``key.path=value`` strings; values parse as YAML scalars."""
    for item in overrides or ():
        if "=" not in item:
            raise InvalidConfig(f"override {item!r} must look like section.key=value")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise InvalidConfig(f"cannot parse override value {raw!r}: {exc}") from exc
        _set_dotted(tree, key.strip(), value)
    return tree


def load_config(path: str | Path | None, overrides=()) -> RunConfig:
    """Load a YAML config (or pure defaults) and apply overrides."""
    tree: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise NotFound(f"config file does not exist: {path}")
        loaded = yaml.safe_load(path.read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise InvalidConfig(f"config root must be a mapping, got {type(loaded).__name__}")
        tree = loaded
    apply_overrides(tree, overrides)
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = ".".join(str(p) for p in first["loc"])
        raise InvalidConfig(f"config error at {loc!r}: {first['msg']}") from exc


def config_hash(cfg: RunConfig) -> str:
    """Stable short hash of the resolved configuration."""
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def config_keys() -> list[str]:
    """Every dotted override key, for CLI help."""
    keys = []
    for section_name, field in RunConfig.model_fields.items():
        for key in field.annotation.model_fields:
            keys.append(f"{section_name}.{key}")
    return keys


def to_policy(cfg: RunConfig) -> AugmentationPolicy:
    p = cfg.policy
    return AugmentationPolicy(
        mode=p.mode,
        base_shape=p.base_shape,
        crop_scale_range=p.crop_scale_range,
        depth_crop=p.depth_crop,
        rotation_degrees=p.rotation_degrees,
        brightness_jitter=p.brightness_jitter,
        contrast_jitter=p.contrast_jitter,
        train_resolution=p.train_resolution,
        eval_resolution=p.eval_resolution,
    )


def to_encoder(cfg: RunConfig) -> EncoderConfig:
    e = cfg.encoder
    return EncoderConfig(
        backbone=e.backbone,
        stage_depths=e.stage_depths,
        channels=e.channels,
        attention_heads=e.attention_heads,
        global_stage_start=e.global_stage_start,
        d_e=e.d_e,
        d_p=e.d_p,
        proj_hidden=e.proj_hidden,
    )


def to_train(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        epochs=t.epochs,
        base_lr=t.base_lr,
        weight_decay=t.weight_decay,
        lr_drop_points=t.lr_drop_points,
        lr_drop_factor=t.lr_drop_factor,
        optimizer=t.optimizer,
        decoupled_weight_decay=t.decoupled_weight_decay,
        seed=t.seed,
        workers=t.workers,
        local_batch=t.local_batch,
        tau=cfg.loss.tau,
        alpha=cfg.mixing.alpha,
        mix_mode=cfg.mixing.mode,
        loss_weights=cfg.loss.weights,
        supcon_count_mode=cfg.loss.count_mode,
    )


def to_phantom(cfg: RunConfig) -> PhantomConfig:
    ph = cfg.phantom
    return PhantomConfig(
        size=ph.size,
        lesion_count_range=ph.lesion_count_range,
        lesion_intensity=ph.lesion_intensity,
        lesion_radius_range=ph.lesion_radius_range,
        seed=ph.seed,
    )


def validate_components(cfg: RunConfig) -> None:
    """Materialize every domain config so inconsistencies fail before work starts."""
    to_policy(cfg)
    to_encoder(cfg)
    to_train(cfg)
    to_phantom(cfg)
