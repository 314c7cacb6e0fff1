import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctmix.errors import InvalidArgument, ProtocolError
from ctmix.mixing import (
    MODE_HYBRID,
    MODE_MIXUP_ONLY,
    STRATEGY_CUTMIX,
    STRATEGY_MIXUP,
    MixDecision,
    ProcessMixingPool,
    SampleBatch,
    WorkerMessage,
    apply_cutmix,
    apply_mixup,
    gather_dispatch,
    hybrid_mix,
    make_message,
    mix_batch,
    open_message,
    sample_mix_decision,
)

SHAPE = (4, 6, 6)


def onehot(labels):
    out = np.zeros((len(labels), 2), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def random_batch(n, seed=0, shape=SHAPE):
    rng = np.random.default_rng(seed)
    return SampleBatch(
        rng.random((n, *shape), dtype=np.float32),
        onehot(rng.integers(0, 2, size=n)),
    )


class TestSampleMixDecision:
    def test_determinism(self):
        a = sample_mix_decision(4, (1, 2, 3), 0.2, SHAPE)
        b = sample_mix_decision(4, (1, 2, 3), 0.2, SHAPE)
        assert a == b

    def test_large_alpha_lambda_near_half(self):
        # Beta(alpha, alpha) concentrates at 1/2 as alpha grows; mixup keeps
        # the raw draw (cutmix rounds lambda to a voxel fraction)
        decisions = [sample_mix_decision(4, (0, 0, step), 1e6, SHAPE) for step in range(1000)]
        lams = [d.lam for d in decisions if d.strategy == STRATEGY_MIXUP]
        assert lams, "expected some mixup draws"
        assert max(abs(l - 0.5) for l in lams) < 1e-2

    def test_strategy_frequency_balanced(self):
        n = 10_000
        cutmix = sum(
            sample_mix_decision(2, (7, 0, step), 0.2, SHAPE).strategy == STRATEGY_CUTMIX
            for step in range(n)
        )
        assert 0.48 <= cutmix / n <= 0.52

    def test_mixup_only_mode(self):
        for step in range(50):
            d = sample_mix_decision(4, (3, 0, step), 0.2, SHAPE, mode=MODE_MIXUP_ONLY)
            assert d.strategy == STRATEGY_MIXUP
            assert d.cut_box is None

    def test_batch_too_small(self):
        with pytest.raises(InvalidArgument):
            sample_mix_decision(1, (0, 0, 0), 0.2, SHAPE)

    def test_cutmix_lambda_matches_box_fraction(self):
        total = SHAPE[0] * SHAPE[1] * SHAPE[2]
        seen_cutmix = 0
        for step in range(200):
            d = sample_mix_decision(4, (11, 0, step), 0.2, SHAPE)
            if d.strategy != STRATEGY_CUTMIX:
                continue
            seen_cutmix += 1
            z0, z1, y0, y1, x0, x1 = d.cut_box
            box = (z1 - z0) * (y1 - y0) * (x1 - x0)
            assert d.lam == 1.0 - box / total
        assert seen_cutmix > 50

    @given(st.integers(min_value=2, max_value=12), st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=60, deadline=None)
    def test_permutation_is_derangement(self, batch_size, step):
        d = sample_mix_decision(batch_size, (5, 1, step), 0.3, SHAPE)
        perm = np.asarray(d.permutation)
        assert sorted(perm) == list(range(batch_size))
        assert np.all(perm != np.arange(batch_size))


class TestApplyMixup:
    def test_lambda_one_identity(self):
        batch = random_batch(4, seed=1)
        d = MixDecision(STRATEGY_MIXUP, 1.0, (1, 0, 3, 2), None, (0, 0, 0))
        out = apply_mixup(batch, d)
        np.testing.assert_array_equal(out.mixed_volumes, batch.volumes)
        np.testing.assert_array_equal(out.mixed_labels, batch.labels)

    def test_half_lambda_soft_labels(self):
        batch = SampleBatch(np.zeros((2, *SHAPE), dtype=np.float32), onehot([0, 1]))
        d = MixDecision(STRATEGY_MIXUP, 0.5, (1, 0), None, (0, 0, 0))
        out = apply_mixup(batch, d)
        np.testing.assert_allclose(out.mixed_labels, [[0.5, 0.5], [0.5, 0.5]])

    def test_constant_volumes_blend(self):
        vols = np.stack([
            np.zeros(SHAPE, dtype=np.float32),
            np.ones(SHAPE, dtype=np.float32),
        ])
        batch = SampleBatch(vols, onehot([0, 1]))
        d = MixDecision(STRATEGY_MIXUP, 0.3, (1, 0), None, (0, 0, 0))
        out = apply_mixup(batch, d)
        np.testing.assert_allclose(out.mixed_volumes[0], 0.7, atol=1e-6)
        np.testing.assert_allclose(out.mixed_volumes[1], 0.3, atol=1e-6)

    def test_wrong_strategy_rejected(self):
        batch = random_batch(2)
        d = MixDecision(STRATEGY_CUTMIX, 0.5, (1, 0), (0, 1, 0, 1, 0, 1), (0, 0, 0))
        with pytest.raises(InvalidArgument):
            apply_mixup(batch, d)

    @given(st.integers(min_value=0, max_value=500))
    @settings(max_examples=40, deadline=None)
    def test_mixed_values_within_source_range(self, step):
        batch = random_batch(4, seed=step)
        out = hybrid_mix(batch, (9, 0, step), 0.2)
        assert out.mixed_volumes.min() >= batch.volumes.min() - 1e-6
        assert out.mixed_volumes.max() <= batch.volumes.max() + 1e-6
        sums = out.mixed_labels.sum(axis=1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-6)
        assert out.mixed_labels.min() >= -1e-7


class TestApplyCutmix:
    def test_empty_box_identity(self):
        batch = random_batch(3, seed=2)
        d = MixDecision(STRATEGY_CUTMIX, 1.0, (1, 2, 0), (0, 0, 0, 0, 0, 0), (0, 0, 0))
        out = apply_cutmix(batch, d)
        np.testing.assert_array_equal(out.mixed_volumes, batch.volumes)
        np.testing.assert_array_equal(out.mixed_labels, batch.labels)

    def test_eighth_box_voxel_count_oracle(self):
        # box of exactly 1/8 the voxels: (2,3,3) of (4,6,6) = 18 of 144... use half dims
        shape = (4, 6, 6)
        box = (0, 2, 0, 3, 0, 3)  # 2*3*3 = 18 = 144/8
        lam = 1.0 - 18 / 144
        vols = np.stack([np.zeros(shape, np.float32), np.ones(shape, np.float32)])
        batch = SampleBatch(vols, onehot([0, 1]))
        d = MixDecision(STRATEGY_CUTMIX, lam, (1, 0), box, (0, 0, 0))
        out = apply_cutmix(batch, d)
        np.testing.assert_allclose(out.mixed_labels[0], [7 / 8, 1 / 8])
        np.testing.assert_allclose(out.mixed_labels[1], [1 / 8, 7 / 8])
        # voxels inside the box come from the partner
        assert out.mixed_volumes[0, 0:2, 0:3, 0:3].min() == 1.0
        assert out.mixed_volumes[0, 2:, :, :].max() == 0.0

    def test_full_box_becomes_partner(self):
        batch = random_batch(2, seed=3)
        d = MixDecision(STRATEGY_CUTMIX, 0.0, (1, 0), (0, 4, 0, 6, 0, 6), (0, 0, 0))
        out = apply_cutmix(batch, d)
        np.testing.assert_array_equal(out.mixed_volumes[0], batch.volumes[1])
        np.testing.assert_array_equal(out.mixed_labels[0], batch.labels[1])

    def test_box_out_of_bounds(self):
        batch = random_batch(2, seed=4)
        d = MixDecision(STRATEGY_CUTMIX, 0.5, (1, 0), (0, 5, 0, 6, 0, 6), (0, 0, 0))
        with pytest.raises(InvalidArgument):
            apply_cutmix(batch, d)

    def test_lambda_box_mismatch_rejected(self):
        batch = random_batch(2, seed=5)
        d = MixDecision(STRATEGY_CUTMIX, 0.9, (1, 0), (0, 2, 0, 3, 0, 3), (0, 0, 0))
        with pytest.raises(InvalidArgument):
            apply_cutmix(batch, d)


class TestGatherDispatch:
    def worker_split(self, batch, world):
        local = len(batch) // world
        return [
            SampleBatch(batch.volumes[r * local:(r + 1) * local].copy(),
                        batch.labels[r * local:(r + 1) * local].copy())
            for r in range(world)
        ]

    def test_single_worker_equals_direct(self):
        batch = random_batch(4, seed=6)
        direct = hybrid_mix(batch, (1, 0, 0), 0.2)
        [dispatched] = gather_dispatch([batch], (1, 0, 0), 0.2)
        np.testing.assert_array_equal(dispatched.mixed_volumes, direct.mixed_volumes)
        np.testing.assert_array_equal(dispatched.mixed_labels, direct.mixed_labels)

    @pytest.mark.parametrize("world,local", [(2, 1), (2, 2), (4, 1), (4, 2)])
    def test_thread_transport_matches_single_process(self, world, local):
        for seed in range(5):
            batch = random_batch(world * local, seed=seed)
            expected = hybrid_mix(batch, (seed, 0, 1), 0.2)
            outs = gather_dispatch(self.worker_split(batch, world), (seed, 0, 1), 0.2)
            got_vol = np.concatenate([o.mixed_volumes for o in outs])
            got_lab = np.concatenate([o.mixed_labels for o in outs])
            assert np.abs(got_vol - expected.mixed_volumes).max() == 0.0
            assert np.abs(got_lab - expected.mixed_labels).max() == 0.0

    def test_process_transport_matches_single_process(self):
        world, local = 2, 2
        with ProcessMixingPool(world) as pool:
            for seed in range(3):
                batch = random_batch(world * local, seed=seed + 10)
                expected = hybrid_mix(batch, (seed, 1, 2), 0.2)
                outs = pool.step(self.worker_split(batch, world), (seed, 1, 2), 0.2)
                got_vol = np.concatenate([o.mixed_volumes for o in outs])
                assert np.abs(got_vol - expected.mixed_volumes).max() <= 1e-6

    def test_repeat_same_seed_identical(self):
        batch = random_batch(4, seed=8)
        workers = self.worker_split(batch, 2)
        a = gather_dispatch(workers, (3, 1, 4), 0.2)
        b = gather_dispatch(workers, (3, 1, 4), 0.2)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.mixed_volumes, y.mixed_volumes)
            np.testing.assert_array_equal(x.mixed_labels, y.mixed_labels)

    def test_unequal_local_sizes_rejected(self):
        with pytest.raises(ProtocolError):
            gather_dispatch([random_batch(2), random_batch(3)], (0, 0, 0), 0.2)

    def test_divergent_seed_tuples_rejected(self):
        workers = [random_batch(2, seed=1), random_batch(2, seed=2)]
        with pytest.raises(ProtocolError):
            gather_dispatch(workers, [(0, 0, 0), (0, 0, 1)], 0.2)

    def test_each_worker_gets_own_rows(self):
        batch = random_batch(6, seed=9)
        workers = self.worker_split(batch, 3)
        outs = gather_dispatch(workers, (2, 2, 2), 0.2)
        for own, out in zip(workers, outs):
            np.testing.assert_array_equal(out.raw.volumes, own.volumes)
            assert len(out.mixed_volumes) == len(own)


class TestWorkerMessages:
    def test_roundtrip(self):
        msg = make_message(1, 5, {"x": np.arange(3)})
        body = open_message(msg, expect_rank=1, expect_step=5)
        np.testing.assert_array_equal(body["x"], np.arange(3))

    def test_checksum_tamper_detected(self):
        msg = make_message(0, 0, [1, 2, 3])
        bad = WorkerMessage(msg.rank, msg.step, msg.payload + b"x", msg.checksum)
        with pytest.raises(ProtocolError):
            open_message(bad)

    def test_wrong_rank_detected(self):
        msg = make_message(0, 0, None)
        with pytest.raises(ProtocolError):
            open_message(msg, expect_rank=1)
