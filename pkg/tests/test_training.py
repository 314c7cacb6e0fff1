import numpy as np
import pytest
import torch

from ctmix.augment import AugmentationPolicy
from ctmix.errors import InvalidArgument, TrainingDiverged
from ctmix.mixing import SampleBatch
from ctmix.modeling import EncoderConfig, build_model
from ctmix.training import (
    TrainConfig,
    VolumeStore,
    build_optimizer,
    epoch_schedule,
    lr_at,
    read_history,
    run_training,
    train_step,
)
from ctmix.volumes import PhantomConfig, read_manifest, synthesize_dataset

TOY_ENCODER = EncoderConfig(
    stage_depths=(1, 1, 1, 1), channels=(8, 16, 24, 32),
    attention_heads=4, global_stage_start=3, d_e=32, d_p=16,
)

TINY_POLICY = AugmentationPolicy(
    mode="volume3d", base_shape=(4, 16, 16), crop_scale_range=(0.8, 1.0),
    depth_crop=4, rotation_degrees=(-5.0, 5.0), brightness_jitter=0.1,
    contrast_jitter=0.1, train_resolution=16, eval_resolution=16,
)


def onehot(labels):
    out = np.zeros((len(labels), 2), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def make_worker_batch(n, seed, shape=(4, 16, 16)):
    rng = np.random.default_rng(seed)
    labels = np.array([i % 2 for i in range(n)], dtype=np.int64)
    return SampleBatch(rng.random((n, *shape), dtype=np.float32), onehot(labels)), labels


class TestLrSchedule:
    def test_hundred_epoch_paper_schedule(self):
        cfg = TrainConfig(epochs=100, base_lr=1e-4)
        assert lr_at(0, cfg) == 1e-4
        assert lr_at(29, cfg) == 1e-4
        assert lr_at(30, cfg) == pytest.approx(1e-5)
        assert lr_at(79, cfg) == pytest.approx(1e-5)
        assert lr_at(80, cfg) == pytest.approx(1e-6)
        assert lr_at(99, cfg) == pytest.approx(1e-6)

    def test_ten_epoch_drop_points(self):
        cfg = TrainConfig(epochs=10, base_lr=1.0)
        values = [lr_at(e, cfg) for e in range(10)]
        assert values[:3] == [1.0] * 3
        assert values[3:8] == pytest.approx([0.1] * 5)
        assert values[8:] == pytest.approx([0.01] * 2)

    def test_no_drop_points_constant(self):
        cfg = TrainConfig(epochs=5, base_lr=0.5, lr_drop_points=())
        assert [lr_at(e, cfg) for e in range(5)] == [0.5] * 5

    def test_out_of_range_epoch(self):
        cfg = TrainConfig(epochs=5)
        with pytest.raises(InvalidArgument):
            lr_at(5, cfg)

    def test_bad_drop_points(self):
        with pytest.raises(InvalidArgument):
            TrainConfig(lr_drop_points=(0.8, 0.3))


class TestEpochSchedule:
    def test_every_scan_exactly_once(self):
        ids = [f"s{i}" for i in range(23)]
        schedule = epoch_schedule(ids, seed=0, epoch=1, workers=1, local_batch=4)
        flat = [s for step in schedule for worker in step for s in worker]
        assert sorted(flat) == sorted(ids)

    def test_deterministic(self):
        ids = [f"s{i}" for i in range(16)]
        a = epoch_schedule(ids, 3, 2, 2, 2)
        b = epoch_schedule(ids, 3, 2, 2, 2)
        assert a == b

    def test_epochs_differ(self):
        ids = [f"s{i}" for i in range(16)]
        assert epoch_schedule(ids, 3, 0, 1, 4) != epoch_schedule(ids, 3, 1, 1, 4)

    def test_multiworker_requires_divisibility(self):
        with pytest.raises(InvalidArgument):
            epoch_schedule([f"s{i}" for i in range(10)], 0, 0, workers=4, local_batch=1)

    def test_equal_local_sizes(self):
        ids = [f"s{i}" for i in range(12)]
        schedule = epoch_schedule(ids, 1, 0, workers=2, local_batch=3)
        for step in schedule:
            assert len(step) == 2
            assert len(step[0]) == len(step[1]) == 3


class TestTrainStep:
    def test_effective_batch_of_four_per_scan(self):
        model = build_model(TOY_ENCODER, seed=0)
        optimizer = build_optimizer(model, TrainConfig(epochs=1))
        views, labels = make_worker_batch(2, seed=0)  # one scan -> two views
        report = train_step(model, optimizer, [views], [labels], (0, 0, 0),
                            TrainConfig(epochs=1), lr=1e-4)
        # 2 raw views contribute con/clf rows, 2 mixed rows contribute mix
        assert len(report.per_sample["total"]) == 2
        assert len(report.per_sample["mix"]) == 2

    def test_zero_learning_rate_keeps_parameters(self):
        model = build_model(TOY_ENCODER, seed=1)
        optimizer = build_optimizer(model, TrainConfig(epochs=1))
        before = [p.detach().clone() for p in model.parameters()]
        views, labels = make_worker_batch(4, seed=1)
        train_step(model, optimizer, [views], [labels], (1, 0, 0),
                   TrainConfig(epochs=1), lr=0.0)
        for p, b in zip(model.parameters(), before):
            assert torch.equal(p, b)

    def test_two_workers_match_single_process_update(self):
        # float64 so the check isolates protocol structure, not conv rounding
        cfg_single = TrainConfig(epochs=1, workers=1, local_batch=2, seed=0)
        cfg_dual = TrainConfig(epochs=1, workers=2, local_batch=1, seed=0)
        batch, labels = make_worker_batch(4, seed=2)

        model_a = build_model(TOY_ENCODER, seed=3).double()
        opt_a = build_optimizer(model_a, cfg_single)
        train_step(model_a, opt_a, [batch], [labels], (5, 0, 0), cfg_single, lr=1e-3)

        model_b = build_model(TOY_ENCODER, seed=3).double()
        opt_b = build_optimizer(model_b, cfg_dual)
        halves = [
            SampleBatch(batch.volumes[:2].copy(), batch.labels[:2].copy()),
            SampleBatch(batch.volumes[2:].copy(), batch.labels[2:].copy()),
        ]
        train_step(model_b, opt_b, halves, [labels[:2], labels[2:]], (5, 0, 0), cfg_dual, lr=1e-3)

        for (name, pa), pb in zip(model_a.named_parameters(), model_b.parameters()):
            denom = pa.detach().norm().item() or 1.0
            rel = (pa - pb).detach().norm().item() / denom
            assert rel < 1e-6, f"{name}: rel diff {rel}"

    def test_divergence_detected(self):
        model = build_model(TOY_ENCODER, seed=4)
        with torch.no_grad():
            model.classifier.weight.fill_(float("nan"))
        optimizer = build_optimizer(model, TrainConfig(epochs=1))
        views, labels = make_worker_batch(2, seed=3)
        with pytest.raises(TrainingDiverged) as err:
            train_step(model, optimizer, [views], [labels], (0, 0, 0),
                       TrainConfig(epochs=1), lr=1e-4)
        assert "seed_tuple" in err.value.diagnostics


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinydata") / "set"
    synthesize_dataset(
        root, 10,
        PhantomConfig(size=(4, 16, 16), seed=5, lesion_radius_range=(0.8, 1.0)),
        split_fractions=(0.8, 0.2), split_seed=0,
    )
    splits = read_manifest(root / "manifest.csv", root)
    return root, splits


class TestRunTraining:
    def test_smoke_two_epochs(self, tiny_dataset, tmp_path):
        root, splits = tiny_dataset
        cfg = TrainConfig(epochs=2, seed=1, local_batch=2)
        result = run_training(cfg, TOY_ENCODER, TINY_POLICY, splits["train"],
                              splits["val"], tmp_path / "run", config_hash="h1")
        assert len(result.history) == 2
        assert (tmp_path / "run" / "history.csv").exists()
        assert (tmp_path / "run" / "best.ckpt").exists()
        rows = read_history(result.history_csv)
        assert [r["epoch"] for r in rows] == [0, 1]

    def test_same_seed_identical_history(self, tiny_dataset, tmp_path):
        root, splits = tiny_dataset
        cfg = TrainConfig(epochs=2, seed=2, local_batch=2)
        a = run_training(cfg, TOY_ENCODER, TINY_POLICY, splits["train"], splits["val"],
                         tmp_path / "a", config_hash="x")
        b = run_training(cfg, TOY_ENCODER, TINY_POLICY, splits["train"], splits["val"],
                         tmp_path / "b", config_hash="x")
        assert (tmp_path / "a" / "history.csv").read_bytes() == (tmp_path / "b" / "history.csv").read_bytes()

    def test_resume_reproduces_uninterrupted_run(self, tiny_dataset, tmp_path):
        root, splits = tiny_dataset
        full_cfg = TrainConfig(epochs=3, seed=3, local_batch=2)
        full = run_training(full_cfg, TOY_ENCODER, TINY_POLICY, splits["train"],
                            splits["val"], tmp_path / "full", config_hash="x")

        # interrupted session: same config, stopped after one epoch
        run_training(full_cfg, TOY_ENCODER, TINY_POLICY, splits["train"], splits["val"],
                     tmp_path / "resumed", config_hash="x", stop_after=1)
        resumed = run_training(full_cfg, TOY_ENCODER, TINY_POLICY, splits["train"],
                               splits["val"], tmp_path / "resumed", config_hash="x", resume=True)
        assert resumed.epochs_run == 2
        assert (tmp_path / "full" / "history.csv").read_bytes() == (
            tmp_path / "resumed" / "history.csv"
        ).read_bytes()

        from ctmix.training import load_model_from_checkpoint

        model_full, _ = load_model_from_checkpoint(full.last_checkpoint)
        model_res, _ = load_model_from_checkpoint(resumed.last_checkpoint)
        for pa, pb in zip(model_full.parameters(), model_res.parameters()):
            assert torch.equal(pa, pb)
