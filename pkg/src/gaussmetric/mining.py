"""Difficult-pair mining and balanced batch assembly.

Candidates stream through the current model in evaluation mode; a pair is
kept only when its metric output sits far from its class target (max-abs
deviation of at least two target standard deviations). A batch is emitted
once b/2 difficult matching and b/2 difficult non-matching pairs have
accumulated; if the epoch's stream runs out first, the would-be batch is
discarded and the optimizer step is skipped.

The full cross-identity pair universe grows quadratically, so each epoch
draws a capped, class-balanced subsample of it (``candidates_per_epoch``);
flip-augmented variants count as distinct candidates.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .dataio import Dataset
from .errors import DatasetError, ShapeError
from .model import ModelParams, pair_forward_np
from .targets import TargetSpec

log = logging.getLogger(__name__)

_FLIP_COMBOS = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.int8)


@dataclass(frozen=True)
class PairSpec:
    """Candidate handle: dataset rows plus per-side flip state."""

    idx1: int
    idx2: int
    flip1: bool
    flip2: bool
    matching: bool

    def key(self) -> tuple:
        """Orientation-normalized identity of the candidate."""
        a = (self.idx1, self.flip1)
        b = (self.idx2, self.flip2)
        return (a, b) if a <= b else (b, a)


@dataclass
class SamplePair:
    """Materialized pair: inputs with flips applied, plus provenance."""

    x1: np.ndarray
    x2: np.ndarray
    id1: int
    id2: int
    spec: PairSpec

    @property
    def matching(self) -> bool:
        return self.id1 == self.id2


@dataclass
class PairBatch:
    """Exactly b/2 difficult matching + b/2 difficult non-matching pairs."""

    matching: list[SamplePair]
    non_matching: list[SamplePair]

    def __post_init__(self):
        if len(self.matching) != len(self.non_matching) or not self.matching:
            raise DatasetError(
                f"batch must be balanced and non-empty, got "
                f"{len(self.matching)}/{len(self.non_matching)}"
            )
        for pair in self.matching:
            if not pair.matching:
                raise DatasetError("non-matching pair filed under matching")
        for pair in self.non_matching:
            if pair.matching:
                raise DatasetError("matching pair filed under non-matching")
        keys = [p.spec.key() for p in self.matching + self.non_matching]
        if len(set(keys)) != len(keys):
            raise DatasetError("duplicate (x1, x2, flip-state) candidate in batch")

    @property
    def b(self) -> int:
        return len(self.matching) + len(self.non_matching)

    def matrices(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(Xm1, Xm2, Xn1, Xn2) as float64 input matrices."""
        stack = lambda pairs, side: np.stack(
            [getattr(p, side) for p in pairs]
        ).astype(np.float64)
        return (
            stack(self.matching, "x1"),
            stack(self.matching, "x2"),
            stack(self.non_matching, "x1"),
            stack(self.non_matching, "x2"),
        )


@dataclass(frozen=True)
class MiningStats:
    """Per-fill accounting for the training log."""

    candidates_seen: int
    seen_m: int
    seen_n: int
    difficult_m: int
    difficult_n: int

    @property
    def fraction_m(self) -> float:
        return self.difficult_m / self.seen_m if self.seen_m else 0.0

    @property
    def fraction_n(self) -> float:
        return self.difficult_n / self.seen_n if self.seen_n else 0.0


def difficult_mask(z: np.ndarray, matching: np.ndarray, targets: TargetSpec) -> np.ndarray:
    """Vectorized difficulty test over a (n, p) block of metric outputs.

    A pair is difficult when the max-abs deviation from its class mean is
    >= 2 sigma; the boundary counts (non-strict inequality).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != targets.p:
        raise ShapeError(f"expected (n, {targets.p}) outputs, got {z.shape}")
    matching = np.asarray(matching, dtype=bool)
    dev_m = np.abs(z - targets.mu_m).max(axis=1)
    dev_n = np.abs(z - targets.mu_n).max(axis=1)
    return np.where(
        matching, dev_m >= 2.0 * targets.sigma_m, dev_n >= 2.0 * targets.sigma_n
    )


def is_difficult(z, matching: bool, targets: TargetSpec) -> bool:
    """Single-pair view of :func:`difficult_mask`."""
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    return bool(difficult_mask(z, np.array([matching]), targets)[0])


def _eligible_identities(dataset: Dataset, min_images: int) -> list[np.ndarray]:
    groups = dataset.identity_index()
    eligible = []
    for identity, rows in enumerate(groups):
        if rows.size < min_images:
            log.warning(
                "identity %d has %d image(s), need %d; excluded from epoch",
                identity,
                rows.size,
                min_images,
            )
        else:
            eligible.append(rows)
    return eligible


def sample_epoch(
    dataset: Dataset, config: TrainConfig, rng: np.random.Generator
) -> deque[PairSpec]:
    """Build one epoch's shuffled candidate stream.

    Uniformly picks ``identities_per_epoch`` eligible identities, then
    draws a balanced subsample of within-identity (matching) and
    cross-identity (non-matching) unordered pairs, each with one of the
    four flip combinations. Deterministic given the generator state.
    """
    eligible = _eligible_identities(dataset, config.min_images)
    if not eligible:
        return deque()
    take = min(config.identities_per_epoch, len(eligible))
    chosen_pos = rng.choice(len(eligible), size=take, replace=False)
    groups = [eligible[i] for i in chosen_pos]

    quota = max(config.candidates_per_epoch // 2, 1)
    specs: list[PairSpec] = []
    specs.extend(_matching_candidates(groups, quota, rng))
    specs.extend(_nonmatching_candidates(dataset, groups, quota, rng))
    order = rng.permutation(len(specs))
    return deque(specs[i] for i in order)


def _with_flips(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, ...]:
    """Expand item pairs with all four flip combinations."""
    reps = _FLIP_COMBOS.shape[0]
    return (
        np.repeat(a, reps),
        np.repeat(b, reps),
        np.tile(_FLIP_COMBOS[:, 0], a.size),
        np.tile(_FLIP_COMBOS[:, 1], a.size),
    )


def _emit(idx1, idx2, f1, f2, matching, rng) -> list[PairSpec]:
    # unordered semantics: orientation is a coin flip at emission
    swap = rng.random(idx1.size) < 0.5
    out = []
    for a, b, fa, fb, s in zip(idx1, idx2, f1, f2, swap):
        if s:
            a, b, fa, fb = b, a, fb, fa
        out.append(
            PairSpec(
                idx1=int(a),
                idx2=int(b),
                flip1=bool(fa),
                flip2=bool(fb),
                matching=matching,
            )
        )
    return out


def _matching_candidates(groups, quota, rng) -> list[PairSpec]:
    firsts, seconds = [], []
    for rows in groups:
        a, b = np.triu_indices(rows.size, k=1)
        firsts.append(rows[a])
        seconds.append(rows[b])
    idx1 = np.concatenate(firsts)
    idx2 = np.concatenate(seconds)
    idx1, idx2, f1, f2 = _with_flips(idx1, idx2)
    total = idx1.size
    if total > quota:
        pick = rng.choice(total, size=quota, replace=False)
        idx1, idx2, f1, f2 = idx1[pick], idx2[pick], f1[pick], f2[pick]
    return _emit(idx1, idx2, f1, f2, True, rng)


def _nonmatching_candidates(dataset, groups, quota, rng) -> list[PairSpec]:
    if len(groups) < 2:
        return []
    pool = np.concatenate(groups)
    within = sum(rows.size * (rows.size - 1) // 2 for rows in groups)
    total_cross = pool.size * (pool.size - 1) // 2 - within
    universe = 4 * total_cross
    if universe <= max(4 * quota, 4096):
        # small universe: enumerate, then subsample
        a, b = np.triu_indices(pool.size, k=1)
        idx1, idx2 = pool[a], pool[b]
        keep = dataset.ids[idx1] != dataset.ids[idx2]
        idx1, idx2, f1, f2 = _with_flips(idx1[keep], idx2[keep])
        if idx1.size > quota:
            pick = rng.choice(idx1.size, size=quota, replace=False)
            idx1, idx2, f1, f2 = idx1[pick], idx2[pick], f1[pick], f2[pick]
        return _emit(idx1, idx2, f1, f2, False, rng)

    # large universe: rejection-sample distinct candidates
    want = min(quota, universe)
    seen: set[tuple] = set()
    out1, out2, of1, of2 = [], [], [], []
    while len(seen) < want:
        n_draw = max(2 * (want - len(seen)), 256)
        a = pool[rng.integers(0, pool.size, size=n_draw)]
        b = pool[rng.integers(0, pool.size, size=n_draw)]
        flips = rng.integers(0, 2, size=(n_draw, 2))
        valid = dataset.ids[a] != dataset.ids[b]
        for i in np.flatnonzero(valid):
            ka, kb = (int(a[i]), int(flips[i, 0])), (int(b[i]), int(flips[i, 1]))
            key = (ka, kb) if ka <= kb else (kb, ka)
            if key in seen:
                continue
            seen.add(key)
            out1.append(key[0][0])
            out2.append(key[1][0])
            of1.append(key[0][1])
            of2.append(key[1][1])
            if len(seen) >= want:
                break
    return _emit(
        np.array(out1), np.array(out2), np.array(of1), np.array(of2), False, rng
    )


def _materialize(dataset: Dataset, specs: list[PairSpec]) -> tuple[np.ndarray, np.ndarray]:
    feats = dataset.features
    x1 = feats[[s.idx1 for s in specs]].astype(np.float64)
    x2 = feats[[s.idx2 for s in specs]].astype(np.float64)
    flip1 = np.array([s.flip1 for s in specs])
    flip2 = np.array([s.flip2 for s in specs])
    if flip1.any():
        x1[flip1] = dataset.flip(x1[flip1])
    if flip2.any():
        x2[flip2] = dataset.flip(x2[flip2])
    return x1, x2


def bootstrap_batches(
    stream: deque[PairSpec],
    dataset: Dataset,
    params: ModelParams,
    targets: TargetSpec,
    b: int,
    rounds: int = 10,
    chunk: int = 2048,
) -> list[PairBatch]:
    """Cold-start fallback: batches of the most-deviant candidates per class.

    A freshly initialized network can emit metric outputs so tightly
    clustered that one class (typically matching, whose target sits at the
    cluster) has zero difficult candidates; the standard fill then discards
    every epoch and no optimizer step would ever happen. This scores the
    whole stream once and emits up to ``rounds`` disjoint balanced batches,
    taking the largest deviations from each class target first. Members are
    NOT guaranteed to pass the difficulty test; the trainer uses this only
    until the standard fill succeeds once. Consumes the stream.

    Returns an empty list when either class cannot fill b/2 pairs.
    """
    half = b // 2
    specs = list(stream)
    stream.clear()
    if not specs:
        return []
    deviations = np.empty(len(specs))
    labels = np.array([s.matching for s in specs])
    for start in range(0, len(specs), chunk):
        block = specs[start : start + chunk]
        x1, x2 = _materialize(dataset, block)
        z = pair_forward_np(params, x1, x2)
        dev_m = np.abs(z - targets.mu_m).max(axis=1)
        dev_n = np.abs(z - targets.mu_n).max(axis=1)
        lab = labels[start : start + len(block)]
        deviations[start : start + len(block)] = np.where(lab, dev_m, dev_n)

    def ranked(mask):
        idx = np.flatnonzero(mask)
        return idx[np.argsort(-deviations[idx], kind="stable")]

    order_m = ranked(labels)
    order_n = ranked(~labels)
    n_batches = min(rounds, order_m.size // half, order_n.size // half)
    batches = []
    for r in range(n_batches):
        chosen = [
            specs[i] for i in order_m[r * half : (r + 1) * half]
        ] + [specs[i] for i in order_n[r * half : (r + 1) * half]]
        x1, x2 = _materialize(dataset, chosen)
        members = [
            SamplePair(
                x1=x1[i],
                x2=x2[i],
                id1=int(dataset.ids[s.idx1]),
                id2=int(dataset.ids[s.idx2]),
                spec=s,
            )
            for i, s in enumerate(chosen)
        ]
        batches.append(
            PairBatch(matching=members[:half], non_matching=members[half:])
        )
    return batches


def fill_batch(
    stream: deque[PairSpec],
    dataset: Dataset,
    params: ModelParams,
    targets: TargetSpec,
    b: int,
    chunk: int = 512,
) -> tuple[PairBatch | None, MiningStats]:
    """Consume the stream until both class quotas are met.

    Difficulty is judged on a frozen parameter snapshot in evaluation mode
    (no dropout), so selection is deterministic. Candidates scored but not
    consumed when the quotas close are pushed back for the next fill, where
    the new snapshot re-judges them. Returns (None, stats) when the stream
    is exhausted first; the caller skips the step.
    """
    half = b // 2
    kept_m: list[SamplePair] = []
    kept_n: list[SamplePair] = []
    seen = seen_m = seen_n = diff_m = diff_n = 0

    while (len(kept_m) < half or len(kept_n) < half) and stream:
        block = [stream.popleft() for _ in range(min(chunk, len(stream)))]
        x1, x2 = _materialize(dataset, block)
        z = pair_forward_np(params, x1, x2)
        labels = np.array([s.matching for s in block])
        hard = difficult_mask(z, labels, targets)

        stop_at = len(block)
        for i, spec in enumerate(block):
            if len(kept_m) >= half and len(kept_n) >= half:
                stop_at = i
                break
            seen += 1
            if spec.matching:
                seen_m += 1
                if hard[i]:
                    diff_m += 1
                    if len(kept_m) < half:
                        kept_m.append(
                            SamplePair(
                                x1=x1[i],
                                x2=x2[i],
                                id1=int(dataset.ids[spec.idx1]),
                                id2=int(dataset.ids[spec.idx2]),
                                spec=spec,
                            )
                        )
            else:
                seen_n += 1
                if hard[i]:
                    diff_n += 1
                    if len(kept_n) < half:
                        kept_n.append(
                            SamplePair(
                                x1=x1[i],
                                x2=x2[i],
                                id1=int(dataset.ids[spec.idx1]),
                                id2=int(dataset.ids[spec.idx2]),
                                spec=spec,
                            )
                        )
        if stop_at < len(block):
            stream.extendleft(reversed(block[stop_at:]))
            break

    stats = MiningStats(
        candidates_seen=seen,
        seen_m=seen_m,
        seen_n=seen_n,
        difficult_m=diff_m,
        difficult_n=diff_n,
    )
    if len(kept_m) < half or len(kept_n) < half:
        return None, stats
    return PairBatch(matching=kept_m, non_matching=kept_n), stats
