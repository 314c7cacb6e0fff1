"""Hybrid mixup/cutmix synthesis and the gather-and-dispatch worker protocol.

Every mixing step is a pure function of ``(gathered batch, seed_tuple)``:
workers all-gather their local batches in rank order, each redundantly
computes the same decision and mixed batch, and keeps its own positions.
This makes per-worker outputs concatenate to exactly the single-process
result regardless of transport.
"""

from __future__ import annotations

import hashlib
import pickle
import threading
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgument, ProtocolError

STRATEGY_MIXUP = "mixup"
STRATEGY_CUTMIX = "cutmix"

MODE_MIXUP_ONLY = "mixup"
MODE_HYBRID = "hybrid"


@dataclass(frozen=True)
class MixDecision:
    """Per-step mixing plan shared by all workers.

    ``lam`` is the balancing coefficient; for cutmix it is re-adjusted to the
    exact voxel fraction outside the cut box. ``permutation`` maps each row to
    its partner and never contains fixed points.
    """

    strategy: str
    lam: float
    permutation: tuple[int, ...]
    cut_box: tuple[int, int, int, int, int, int] | None
    seed_tuple: tuple[int, int, int]


@dataclass
class SampleBatch:
    """A mini-batch of volumes with one-hot (or soft) label rows."""

    volumes: np.ndarray  # (B, T, H, W) float32
    labels: np.ndarray  # (B, 2) rows on the simplex

    def __post_init__(self):
        self.volumes = np.asarray(self.volumes, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.float32)
        if self.volumes.ndim != 4:
            raise InvalidArgument(f"batch volumes must be (B,T,H,W), got {self.volumes.shape}")
        if self.labels.shape != (len(self.volumes), 2):
            raise InvalidArgument(
                f"labels must be ({len(self.volumes)}, 2), got {self.labels.shape}"
            )

    def __len__(self) -> int:
        return len(self.volumes)


@dataclass
class MixedBatch:
    """Raw samples plus their mixed counterparts with convex soft labels."""

    raw: SampleBatch
    mixed_volumes: np.ndarray
    mixed_labels: np.ndarray

    def __post_init__(self):
        self.mixed_volumes = np.asarray(self.mixed_volumes, dtype=np.float32)
        self.mixed_labels = np.asarray(self.mixed_labels, dtype=np.float32)
        if len(self.mixed_volumes) != len(self.raw):
            raise InvalidArgument("mixed and raw sample counts differ")
        if self.mixed_labels.min() < -1e-6 or np.abs(self.mixed_labels.sum(axis=1) - 1.0).max() > 1e-6:
            raise InvalidArgument("mixed labels must be nonnegative rows summing to 1")


def _derangement(rng: np.random.Generator, n: int) -> np.ndarray:
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def sample_mix_decision(
    batch_size: int,
    seed_tuple: tuple[int, int, int],
    alpha: float,
    volume_shape: tuple[int, int, int],
    mode: str = MODE_HYBRID,
) -> MixDecision:
    """Draw the per-step strategy, coefficient, partner permutation, and cut box.

    The draw is a pure function of its arguments: strategy is a fair coin
    (hybrid mode only), lambda ~ Beta(alpha, alpha) shared by the whole batch,
    and the cutmix box extent is (1 - lambda)^(1/3) per axis, after which
    lambda is re-adjusted to the exact voxel fraction outside the box.
    """
    if batch_size < 2:
        raise InvalidArgument(f"need batch_size >= 2 to pick mixing partners, got {batch_size}")
    if alpha <= 0:
        raise InvalidArgument(f"alpha must be positive, got {alpha}")
    if mode not in (MODE_MIXUP_ONLY, MODE_HYBRID):
        raise InvalidArgument(f"unknown mixing mode {mode!r}")
    seed_tuple = tuple(int(s) for s in seed_tuple)
    rng = np.random.default_rng(np.random.SeedSequence(seed_tuple))
    if mode == MODE_HYBRID:
        strategy = STRATEGY_MIXUP if rng.random() < 0.5 else STRATEGY_CUTMIX
    else:
        strategy = STRATEGY_MIXUP
    lam = float(rng.beta(alpha, alpha))
    perm = _derangement(rng, batch_size)

    cut_box = None
    if strategy == STRATEGY_CUTMIX:
        dims = tuple(int(d) for d in volume_shape)
        frac = (1.0 - lam) ** (1.0 / 3.0)
        extents = [min(d, int(round(frac * d))) for d in dims]
        starts = [
            int(rng.integers(0, d - e + 1)) if e < d else 0 for d, e in zip(dims, extents)
        ]
        cut_box = (
            starts[0], starts[0] + extents[0],
            starts[1], starts[1] + extents[1],
            starts[2], starts[2] + extents[2],
        )
        box_voxels = extents[0] * extents[1] * extents[2]
        total = dims[0] * dims[1] * dims[2]
        lam = 1.0 - box_voxels / total
    return MixDecision(
        strategy=strategy,
        lam=lam,
        permutation=tuple(int(p) for p in perm),
        cut_box=cut_box,
        seed_tuple=seed_tuple,
    )


def _check_partner_shapes(batch: SampleBatch, decision: MixDecision) -> None:
    if len(decision.permutation) != len(batch):
        raise InvalidArgument(
            f"decision permutation covers {len(decision.permutation)} rows, batch has {len(batch)}"
        )


def apply_mixup(batch: SampleBatch, decision: MixDecision) -> MixedBatch:
    """Voxelwise and labelwise convex combination with the partner row."""
    if decision.strategy != STRATEGY_MIXUP:
        raise InvalidArgument(f"decision strategy is {decision.strategy}, expected mixup")
    _check_partner_shapes(batch, decision)
    perm = np.asarray(decision.permutation)
    lam = np.float32(decision.lam)
    if decision.lam == 1.0:
        mixed_vol = batch.volumes.copy()
        mixed_lab = batch.labels.copy()
    else:
        mixed_vol = lam * batch.volumes + (np.float32(1.0) - lam) * batch.volumes[perm]
        mixed_lab = lam * batch.labels + (np.float32(1.0) - lam) * batch.labels[perm]
    return MixedBatch(raw=batch, mixed_volumes=mixed_vol, mixed_labels=mixed_lab)


def apply_cutmix(batch: SampleBatch, decision: MixDecision) -> MixedBatch:
    """Replace the cut box with the partner's voxels; label by exact voxel fraction."""
    if decision.strategy != STRATEGY_CUTMIX:
        raise InvalidArgument(f"decision strategy is {decision.strategy}, expected cutmix")
    if decision.cut_box is None:
        raise InvalidArgument("cutmix decision carries no cut box")
    _check_partner_shapes(batch, decision)
    z0, z1, y0, y1, x0, x1 = decision.cut_box
    shape = batch.volumes.shape[1:]
    if not (0 <= z0 <= z1 <= shape[0] and 0 <= y0 <= y1 <= shape[1] and 0 <= x0 <= x1 <= shape[2]):
        raise InvalidArgument(f"cut box {decision.cut_box} outside volume bounds {shape}")
    box_voxels = (z1 - z0) * (y1 - y0) * (x1 - x0)
    lam_exact = 1.0 - box_voxels / (shape[0] * shape[1] * shape[2])
    if decision.lam != lam_exact:
        raise InvalidArgument(
            f"decision lambda {decision.lam} does not match box voxel fraction {lam_exact}"
        )
    perm = np.asarray(decision.permutation)
    mixed_vol = batch.volumes.copy()
    mixed_vol[:, z0:z1, y0:y1, x0:x1] = batch.volumes[perm][:, z0:z1, y0:y1, x0:x1]
    lam = np.float32(lam_exact)
    if lam_exact == 1.0:
        mixed_lab = batch.labels.copy()
    else:
        mixed_lab = lam * batch.labels + (np.float32(1.0) - lam) * batch.labels[perm]
    return MixedBatch(raw=batch, mixed_volumes=mixed_vol, mixed_labels=mixed_lab)


def mix_batch(batch: SampleBatch, decision: MixDecision) -> MixedBatch:
    """Apply whichever strategy the decision selected."""
    if decision.strategy == STRATEGY_CUTMIX:
        return apply_cutmix(batch, decision)
    return apply_mixup(batch, decision)


def hybrid_mix(
    batch: SampleBatch,
    seed_tuple: tuple[int, int, int],
    alpha: float,
    mode: str = MODE_HYBRID,
) -> MixedBatch:
    """Single-process reference path: decide and mix in one call."""
    decision = sample_mix_decision(
        len(batch), seed_tuple, alpha, tuple(batch.volumes.shape[1:]), mode=mode
    )
    return mix_batch(batch, decision)


# ---------------------------------------------------------------------------
# gather-and-dispatch transports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorkerMessage:
    """Wire envelope for the process transport; checksum guards the payload."""

    rank: int
    step: int
    payload: bytes
    checksum: str


def make_message(rank: int, step: int, obj) -> WorkerMessage:
    payload = pickle.dumps(obj, protocol=pickle.HIGHEST_PROTOCOL)
    return WorkerMessage(rank, step, payload, hashlib.sha256(payload).hexdigest())


def open_message(msg: WorkerMessage, expect_rank: int | None = None, expect_step: int | None = None):
    if hashlib.sha256(msg.payload).hexdigest() != msg.checksum:
        raise ProtocolError(f"checksum mismatch in message from rank {msg.rank} step {msg.step}")
    if expect_rank is not None and msg.rank != expect_rank:
        raise ProtocolError(f"expected message from rank {expect_rank}, got {msg.rank}")
    if expect_step is not None and msg.step != expect_step:
        raise ProtocolError(f"expected step {expect_step}, got {msg.step}")
    return pickle.loads(msg.payload)


def _validate_worker_inputs(worker_batches, seed_tuples):
    if len(worker_batches) < 1:
        raise InvalidArgument("need at least one worker")
    sizes = {len(b) for b in worker_batches}
    if len(sizes) != 1:
        raise ProtocolError(f"unequal local batch sizes across workers: {sorted(sizes)}")
    shapes = {b.volumes.shape[1:] for b in worker_batches}
    if len(shapes) != 1:
        raise ProtocolError(f"divergent volume shapes across workers: {sorted(shapes)}")
    tuples = {tuple(int(x) for x in t) for t in seed_tuples}
    if len(tuples) != 1:
        raise ProtocolError(f"divergent seed tuples across workers: {sorted(tuples)}")
    return tuples.pop()


def _slice_mixed(full: MixedBatch, rank: int, local: int, own: SampleBatch) -> MixedBatch:
    lo, hi = rank * local, (rank + 1) * local
    return MixedBatch(
        raw=own,
        mixed_volumes=full.mixed_volumes[lo:hi].copy(),
        mixed_labels=full.mixed_labels[lo:hi].copy(),
    )


def _gather_dispatch_threads(worker_batches, seed_tuple, alpha, mode) -> list[MixedBatch]:
    world = len(worker_batches)
    local = len(worker_batches[0])
    slots: list[SampleBatch | None] = [None] * world
    results: list[MixedBatch | None] = [None] * world
    errors: list[Exception] = []
    barrier = threading.Barrier(world)

    def run(rank: int):
        try:
            slots[rank] = worker_batches[rank]
            barrier.wait()
            gathered = SampleBatch(
                np.concatenate([s.volumes for s in slots]),
                np.concatenate([s.labels for s in slots]),
            )
            decision = sample_mix_decision(
                len(gathered), seed_tuple, alpha, tuple(gathered.volumes.shape[1:]), mode=mode
            )
            full = mix_batch(gathered, decision)
            results[rank] = _slice_mixed(full, rank, local, worker_batches[rank])
        except Exception as exc:  # surfaced to the caller below
            errors.append(exc)
            barrier.abort()

    threads = [threading.Thread(target=run, args=(r,)) for r in range(world)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return results  # type: ignore[return-value]


def gather_dispatch(
    worker_batches: Sequence[SampleBatch],
    seed_tuple,
    alpha: float,
    mode: str = MODE_HYBRID,
    transport: str = "thread",
) -> list[MixedBatch]:
    """Mix across all workers' samples and return each worker its own rows.

    ``seed_tuple`` may be a single tuple or one per worker (which must agree;
    divergence raises ProtocolError, as do unequal local batch sizes).
    """
    if isinstance(seed_tuple, (list,)) or (
        isinstance(seed_tuple, tuple) and seed_tuple and isinstance(seed_tuple[0], (tuple, list))
    ):
        seed_tuples = list(seed_tuple)
        if len(seed_tuples) != len(worker_batches):
            raise ProtocolError("one seed tuple per worker required")
    else:
        seed_tuples = [seed_tuple] * max(len(worker_batches), 1)
    shared = _validate_worker_inputs(worker_batches, seed_tuples)
    if transport == "thread":
        return _gather_dispatch_threads(worker_batches, shared, alpha, mode)
    if transport == "process":
        with ProcessMixingPool(len(worker_batches)) as pool:
            return pool.step(worker_batches, shared, alpha, mode)
    raise InvalidArgument(f"unknown transport {transport!r}")


def _process_worker_loop(rank: int, conn) -> None:
    step = 0
    while True:
        msg = conn.recv()
        command, body = open_message(msg, expect_rank=rank)
        if command == "stop":
            conn.close()
            return
        local_batch, seed_tuple, alpha, mode = body
        # contribute the local batch to the all-gather
        conn.send(make_message(rank, step, (local_batch.volumes, local_batch.labels, seed_tuple)))
        bcast = conn.recv()
        _, gathered_arrays = open_message(bcast, expect_rank=rank, expect_step=step)
        gathered = SampleBatch(*gathered_arrays)
        decision = sample_mix_decision(
            len(gathered), seed_tuple, alpha, tuple(gathered.volumes.shape[1:]), mode=mode
        )
        full = mix_batch(gathered, decision)
        local = len(local_batch)
        lo, hi = rank * local, (rank + 1) * local
        conn.send(
            make_message(rank, step, (full.mixed_volumes[lo:hi], full.mixed_labels[lo:hi]))
        )
        step += 1


class ProcessMixingPool:
    """Persistent process-backed workers exchanging checksummed messages."""

    def __init__(self, world: int):
        import multiprocessing as mp

        ctx = mp.get_context("fork")
        self._world = world
        self._conns = []
        self._procs = []
        self._step = 0
        for rank in range(world):
            parent, child = ctx.Pipe()
            proc = ctx.Process(target=_process_worker_loop, args=(rank, child), daemon=True)
            proc.start()
            child.close()
            self._conns.append(parent)
            self._procs.append(proc)

    def step(self, worker_batches, seed_tuple, alpha, mode=MODE_HYBRID) -> list[MixedBatch]:
        if len(worker_batches) != self._world:
            raise ProtocolError(f"pool has {self._world} workers, got {len(worker_batches)} batches")
        shared = _validate_worker_inputs(worker_batches, [seed_tuple] * self._world)
        for rank, conn in enumerate(self._conns):
            conn.send(make_message(rank, self._step, ("mix", (worker_batches[rank], shared, alpha, mode))))
        contributions = []
        seeds_seen = []
        for rank, conn in enumerate(self._conns):
            volumes, labels, seed_echo = open_message(
                conn.recv(), expect_rank=rank, expect_step=self._step
            )
            contributions.append((volumes, labels))
            seeds_seen.append(tuple(seed_echo))
        if len(set(seeds_seen)) != 1:
            raise ProtocolError(f"divergent seed tuples across workers: {sorted(set(seeds_seen))}")
        gathered = (
            np.concatenate([c[0] for c in contributions]),
            np.concatenate([c[1] for c in contributions]),
        )
        for rank, conn in enumerate(self._conns):
            conn.send(make_message(rank, self._step, ("gathered", gathered)))
        results = []
        for rank, conn in enumerate(self._conns):
            mixed_volumes, mixed_labels = open_message(
                conn.recv(), expect_rank=rank, expect_step=self._step
            )
            results.append(
                MixedBatch(
                    raw=worker_batches[rank],
                    mixed_volumes=mixed_volumes,
                    mixed_labels=mixed_labels,
                )
            )
        self._step += 1
        return results

    def close(self) -> None:
        for rank, conn in enumerate(self._conns):
            try:
                conn.send(make_message(rank, self._step, ("stop", None)))
                conn.close()
            except (BrokenPipeError, OSError):
                pass
        for proc in self._procs:
            proc.join(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
