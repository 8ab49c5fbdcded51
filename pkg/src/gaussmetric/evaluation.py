"""Test-time pipeline: flip aggregation, verification metrics, diagnostics.

A pair is scored by averaging the metric output over the four flip
combinations of its inputs (P1..P4 in a fixed order), then thresholded by
the decision rule. The evaluation suite reports accuracy, the ROC curve
with GAR at fixed FAR budgets, per-class moment summaries for both the
single-orientation and aggregated outputs, and histograms.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .dataio import Dataset
from .errors import ConfigError, DatasetError, InsufficientBatchError, ShapeError
from .model import ModelConfig, ModelParams, pair_forward_np
from .targets import DecisionRule, TargetSpec

log = logging.getLogger(__name__)

FAR_TARGETS = (1e-2, 1e-3)
HISTOGRAM_BINS = 40


@dataclass(frozen=True)
class EvalPair:
    """Dataset row indices plus the ground-truth label."""

    idx1: int
    idx2: int
    matching: bool


@dataclass(frozen=True)
class AggregatedStatistic:
    """z-bar and the four flip-combination outputs it averages."""

    z_bar: np.ndarray  # (p,)
    contributions: np.ndarray  # (4, p), P1..P4 order

    def __post_init__(self):
        if self.contributions.shape[0] != 4:
            raise ShapeError(
                f"exactly 4 flip contributions required, got "
                f"{self.contributions.shape[0]}"
            )


def aggregate_batch(
    params: ModelParams, dataset: Dataset, x1: np.ndarray, x2: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Four-flip outputs for a batch of pairs.

    Returns (z_all, z_bar): z_all is (4, n, p) in the fixed order
    P1=(x1,x2), P2=(flip x1, x2), P3=(x1, flip x2), P4=(flip x1, flip x2);
    z_bar is their arithmetic mean, (n, p).
    """
    f1 = dataset.flip(x1)
    f2 = dataset.flip(x2)
    z_all = np.stack(
        [
            pair_forward_np(params, x1, x2),
            pair_forward_np(params, f1, x2),
            pair_forward_np(params, x1, f2),
            pair_forward_np(params, f1, f2),
        ]
    )
    return z_all, z_all.mean(axis=0)


def aggregate(
    params: ModelParams, dataset: Dataset, x1: np.ndarray, x2: np.ndarray
) -> AggregatedStatistic:
    """Single-pair view of :func:`aggregate_batch`."""
    x1 = np.asarray(x1, dtype=np.float64).reshape(1, -1)
    x2 = np.asarray(x2, dtype=np.float64).reshape(1, -1)
    z_all, z_bar = aggregate_batch(params, dataset, x1, x2)
    return AggregatedStatistic(
        z_bar=z_bar[0].copy(), contributions=z_all[:, 0, :].copy()
    )


def verify(
    params: ModelParams,
    dataset: Dataset,
    x1: np.ndarray,
    x2: np.ndarray,
    targets: TargetSpec,
) -> tuple[bool, float, AggregatedStatistic]:
    """Label one pair: (matching?, margin, aggregated statistic).

    Margin is the decision rule's signed score on z-bar; a tie (margin 0)
    labels non-matching. Not symmetric in (x1, x2): the metric head sees
    an ordered concatenation.
    """
    agg = aggregate(params, dataset, x1, x2)
    rule = DecisionRule(targets)
    margin = float(rule.margin(agg.z_bar)[0])
    return margin > 0.0, margin, agg


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    far: float
    gar: float


def roc_curve(
    matching: np.ndarray, non_matching: np.ndarray
) -> tuple[list[RocPoint], dict[float, float]]:
    """Threshold sweep over all distinct pooled margins.

    Acceptance is strict (margin > t). Points come out in descending
    threshold order, so FAR and GAR are non-decreasing along the list.
    GAR@FAR=alpha is read at the smallest swept threshold still keeping
    FAR <= alpha (the conservative empirical operating point, no
    interpolation).
    """
    matching = np.asarray(matching, dtype=np.float64).reshape(-1)
    non_matching = np.asarray(non_matching, dtype=np.float64).reshape(-1)
    if matching.size == 0 or non_matching.size == 0:
        raise InsufficientBatchError(
            "ROC needs at least one score in each class, got "
            f"{matching.size} matching / {non_matching.size} non-matching"
        )
    thresholds = np.unique(np.concatenate([matching, non_matching]))[::-1]
    # searchsorted on the sorted copies: count strictly greater than t
    m_sorted = np.sort(matching)
    n_sorted = np.sort(non_matching)
    gar = 1.0 - np.searchsorted(m_sorted, thresholds, side="right") / matching.size
    far = 1.0 - np.searchsorted(n_sorted, thresholds, side="right") / non_matching.size
    points = [
        RocPoint(threshold=float(t), far=float(f), gar=float(g))
        for t, f, g in zip(thresholds, far, gar)
    ]
    gar_at = {}
    for alpha in FAR_TARGETS:
        feasible = [pt for pt in points if pt.far <= alpha]
        # the last feasible point in descending-t order has the smallest
        # threshold, hence the largest GAR within the FAR budget
        gar_at[alpha] = feasible[-1].gar if feasible else 0.0
    return points, gar_at


@dataclass(frozen=True)
class MomentSummary:
    """Population moments of a scalar sample."""

    count: int
    mean: float
    variance: float
    skewness: float
    kurtosis: float
    degenerate: bool

    @classmethod
    def from_values(cls, values: np.ndarray) -> "MomentSummary":
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.size < 4:
            raise InsufficientBatchError(
                f"moment report needs >= 4 samples, got {values.size}"
            )
        mean = values.mean()
        centered = values - mean
        m2 = np.mean(centered**2)
        if m2 <= 0.0:
            return cls(
                count=values.size,
                mean=float(mean),
                variance=0.0,
                skewness=float("nan"),
                kurtosis=float("nan"),
                degenerate=True,
            )
        m3 = np.mean(centered**3)
        m4 = np.mean(centered**4)
        return cls(
            count=values.size,
            mean=float(mean),
            variance=float(m2),
            skewness=float(m3 / m2**1.5),
            # raw (not excess) kurtosis: Gaussian = 3
            kurtosis=float(m4 / m2**2),
            degenerate=False,
        )


@dataclass(frozen=True)
class ClassHistogram:
    edges: np.ndarray  # (bins + 1,)
    matching: np.ndarray  # (bins,) counts
    non_matching: np.ndarray  # (bins,) counts


def _histogram(m_values: np.ndarray, n_values: np.ndarray) -> ClassHistogram:
    pooled = np.concatenate([m_values, n_values])
    lo, hi = pooled.min(), pooled.max()
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, HISTOGRAM_BINS + 1)
    cm, _ = np.histogram(m_values, bins=edges)
    cn, _ = np.histogram(n_values, bins=edges)
    return ClassHistogram(edges=edges, matching=cm, non_matching=cn)


@dataclass
class EvalReport:
    n_matching: int
    n_non_matching: int
    accuracy: float
    roc: list[RocPoint] = field(repr=False)
    gar_at_far: dict[float, float]
    moments: dict[str, dict[str, MomentSummary]]
    histograms: dict[str, ClassHistogram] = field(repr=False)


def _scalar_view(z: np.ndarray) -> np.ndarray:
    """Scalar summary per pair for moments/histograms.

    Identity for p = 1; the across-dimension mean otherwise (documented
    reduction so diagnostics stay one-dimensional).
    """
    return z.mean(axis=1)


def evaluate_pairs(
    params: ModelParams,
    dataset: Dataset,
    pairs: list[EvalPair],
    targets: TargetSpec,
    chunk: int = 1024,
) -> EvalReport:
    """Score labeled pairs and assemble the full report."""
    if not pairs:
        raise DatasetError("no pairs to evaluate")
    labels = np.array([p.matching for p in pairs])
    if not labels.any() or labels.all():
        raise DatasetError(
            "evaluation needs both classes, got "
            f"{int(labels.sum())} matching / {int((~labels).sum())} non-matching"
        )
    feats = dataset.features
    z_first = np.empty((len(pairs), targets.p))
    z_bar = np.empty((len(pairs), targets.p))
    for start in range(0, len(pairs), chunk):
        block = pairs[start : start + chunk]
        x1 = feats[[p.idx1 for p in block]].astype(np.float64)
        x2 = feats[[p.idx2 for p in block]].astype(np.float64)
        z_all, zb = aggregate_batch(params, dataset, x1, x2)
        z_first[start : start + len(block)] = z_all[0]
        z_bar[start : start + len(block)] = zb

    rule = DecisionRule(targets)
    margins = rule.margin(z_bar)
    decisions = margins > 0.0
    accuracy = float((decisions == labels).mean())
    roc, gar_at = roc_curve(margins[labels], margins[~labels])

    sz = _scalar_view(z_first)
    szb = _scalar_view(z_bar)
    moments = {
        "z": {
            "matching": MomentSummary.from_values(sz[labels]),
            "non_matching": MomentSummary.from_values(sz[~labels]),
        },
        "z_bar": {
            "matching": MomentSummary.from_values(szb[labels]),
            "non_matching": MomentSummary.from_values(szb[~labels]),
        },
    }
    histograms = {
        "z": _histogram(sz[labels], sz[~labels]),
        "z_bar": _histogram(szb[labels], szb[~labels]),
    }
    return EvalReport(
        n_matching=int(labels.sum()),
        n_non_matching=int((~labels).sum()),
        accuracy=accuracy,
        roc=roc,
        gar_at_far=gar_at,
        moments=moments,
        histograms=histograms,
    )


def sample_eval_pairs(
    dataset: Dataset,
    n_matching: int,
    n_non_matching: int,
    rng: np.random.Generator,
) -> list[EvalPair]:
    """Draw distinct unordered item pairs, balanced as requested.

    Matching pairs come from within identities, non-matching across; both
    sampled uniformly without replacement from their universes.
    """
    groups = dataset.identity_index()
    groups = [g for g in groups if g.size >= 2]
    if not groups and n_matching > 0:
        raise DatasetError("no identity has 2 images; cannot form matching pairs")
    if dataset.n_identities < 2 and n_non_matching > 0:
        raise DatasetError("need 2 identities for non-matching pairs")

    pairs: list[EvalPair] = []
    universe_m = []
    for g in groups:
        a, b = np.triu_indices(g.size, k=1)
        universe_m.extend(zip(g[a].tolist(), g[b].tolist()))
    if len(universe_m) < n_matching:
        raise DatasetError(
            f"matching-pair universe has {len(universe_m)} pairs, "
            f"need {n_matching}"
        )
    for i in rng.choice(len(universe_m), size=n_matching, replace=False):
        a, b = universe_m[i]
        if rng.random() < 0.5:
            a, b = b, a
        pairs.append(EvalPair(idx1=int(a), idx2=int(b), matching=True))

    seen: set[tuple[int, int]] = set()
    guard = 0
    while len(seen) < n_non_matching:
        guard += 1
        if guard > 10000:
            raise DatasetError(
                f"could not collect {n_non_matching} distinct non-matching "
                f"pairs, stalled at {len(seen)}"
            )
        n_draw = max(2 * (n_non_matching - len(seen)), 64)
        a = rng.integers(0, dataset.n_items, size=n_draw)
        b = rng.integers(0, dataset.n_items, size=n_draw)
        for i in np.flatnonzero(dataset.ids[a] != dataset.ids[b]):
            key = (min(a[i], b[i]), max(a[i], b[i]))
            if key in seen:
                continue
            seen.add(key)
            x, y = (int(a[i]), int(b[i]))
            pairs.append(EvalPair(idx1=x, idx2=y, matching=False))
            if len(seen) >= n_non_matching:
                break
    return pairs


def read_pairs_file(path, dataset: Dataset) -> list[EvalPair]:
    """Parse a text pairs file: one "idx1 idx2 label" triple per line.

    Label is 1 for matching, 0 for non-matching, and must agree with the
    dataset's identity ids. Blank lines and #-comments are skipped.
    """
    pairs = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DatasetError(
                f"{path}:{lineno}: expected 'idx1 idx2 label', got {raw!r}"
            )
        try:
            a, b, lab = (int(x) for x in parts)
        except ValueError:
            raise DatasetError(
                f"{path}:{lineno}: non-integer field in {raw!r}"
            ) from None
        if not (0 <= a < dataset.n_items and 0 <= b < dataset.n_items):
            raise DatasetError(
                f"{path}:{lineno}: item index out of range 0..{dataset.n_items - 1}"
            )
        if lab not in (0, 1):
            raise DatasetError(f"{path}:{lineno}: label must be 0 or 1, got {lab}")
        actual = dataset.ids[a] == dataset.ids[b]
        if bool(lab) != bool(actual):
            raise DatasetError(
                f"{path}:{lineno}: label {lab} contradicts identity ids "
                f"({int(dataset.ids[a])} vs {int(dataset.ids[b])})"
            )
        pairs.append(EvalPair(idx1=a, idx2=b, matching=bool(lab)))
    return pairs


def write_report(report: EvalReport, out_dir) -> dict[str, Path]:
    """Emit the report CSVs; returns the file map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}

    path = out / "roc.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "far", "gar"])
        for pt in report.roc:
            w.writerow([f"{pt.threshold:.10g}", f"{pt.far:.8f}", f"{pt.gar:.8f}"])
    files["roc"] = path

    path = out / "moments.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            [
                "statistic",
                "class",
                "count",
                "mean",
                "variance",
                "skewness",
                "kurtosis",
                "degenerate",
            ]
        )
        for stat in ("z", "z_bar"):
            for cls in ("matching", "non_matching"):
                m = report.moments[stat][cls]
                w.writerow(
                    [
                        stat,
                        cls,
                        m.count,
                        f"{m.mean:.10g}",
                        f"{m.variance:.10g}",
                        f"{m.skewness:.10g}",
                        f"{m.kurtosis:.10g}",
                        int(m.degenerate),
                    ]
                )
    files["moments"] = path

    for stat, name in (("z", "histogram_z.csv"), ("z_bar", "histogram_zbar.csv")):
        path = out / name
        hist = report.histograms[stat]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "matching", "non_matching"])
            for i in range(hist.matching.size):
                w.writerow(
                    [
                        f"{hist.edges[i]:.10g}",
                        f"{hist.edges[i + 1]:.10g}",
                        int(hist.matching[i]),
                        int(hist.non_matching[i]),
                    ]
                )
        files[name.removesuffix(".csv")] = path

    path = out / "summary.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerow(["accuracy", f"{report.accuracy:.8f}"])
        w.writerow(["n_matching", report.n_matching])
        w.writerow(["n_non_matching", report.n_non_matching])
        for alpha in sorted(report.gar_at_far, reverse=True):
            w.writerow([f"gar_at_far_{alpha:g}", f"{report.gar_at_far[alpha]:.8f}"])
    files["summary"] = path
    return files


@dataclass
class SweepRow:
    """One diagnose-sweep grid point."""

    w: float
    status: str  # "ok" or the error text
    accuracy: float = float("nan")
    skewness_m: float = float("nan")
    kurtosis_m: float = float("nan")
    skewness_n: float = float("nan")
    kurtosis_n: float = float("nan")

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def diagnose_sweep(
    dataset: Dataset,
    model_config: ModelConfig,
    base_targets: TargetSpec,
    train_config: TrainConfig,
    w_grid,
    work_dir,
    n_eval_pairs: int = 200,
) -> list[SweepRow]:
    """Retrain at each non-matching target mean w and report the metrics.

    Each grid point trains a fresh model with mu_n = w (everything else
    from the base configs), then evaluates moments and accuracy on pairs
    sampled from the dataset. Failures (invalid target, mining livelock,
    numeric abort) are recorded in the row and the sweep continues.
    """
    from .trainer import train  # deferred: trainer imports this module's peers

    rows = []
    work = Path(work_dir)
    for w in w_grid:
        w = float(w)
        try:
            targets_w = TargetSpec(
                mu_m=base_targets.mu_m,
                mu_n=w,
                sigma_m=base_targets.sigma_m,
                sigma_n=base_targets.sigma_n,
                p=base_targets.p,
            )
        except ConfigError as exc:
            rows.append(SweepRow(w=w, status=str(exc)))
            log.warning("sweep point w=%g rejected: %s", w, exc)
            continue
        try:
            result = train(
                dataset,
                model_config,
                targets_w,
                train_config,
                work / f"w_{w:g}",
            )
            pairs = sample_eval_pairs(
                dataset,
                n_eval_pairs,
                n_eval_pairs,
                np.random.default_rng([train_config.seed, 29]),
            )
            report = evaluate_pairs(result.params, dataset, pairs, targets_w)
        except (DatasetError, ConfigError, InsufficientBatchError) as exc:
            rows.append(SweepRow(w=w, status=str(exc)))
            log.warning("sweep point w=%g failed: %s", w, exc)
            continue
        # a run stopped early (livelock/numeric) still has usable weights;
        # keep its metrics but flag the row
        status = (
            "ok"
            if result.stop_reason == "completed"
            else f"partial: {result.stop_reason} after {result.steps} steps"
        )
        rows.append(
            SweepRow(
                w=w,
                status=status,
                accuracy=report.accuracy,
                skewness_m=report.moments["z"]["matching"].skewness,
                kurtosis_m=report.moments["z"]["matching"].kurtosis,
                skewness_n=report.moments["z"]["non_matching"].skewness,
                kurtosis_n=report.moments["z"]["non_matching"].kurtosis,
            )
        )
        log.info("sweep point w=%g: accuracy %.4f", w, report.accuracy)
    return rows


def write_sweep(rows: list[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            [
                "w",
                "status",
                "accuracy",
                "skewness_matching",
                "kurtosis_matching",
                "skewness_non_matching",
                "kurtosis_non_matching",
            ]
        )
        for row in rows:
            w.writerow(
                [
                    f"{row.w:g}",
                    row.status,
                    f"{row.accuracy:.8f}",
                    f"{row.skewness_m:.8f}",
                    f"{row.kurtosis_m:.8f}",
                    f"{row.skewness_n:.8f}",
                    f"{row.kurtosis_n:.8f}",
                ]
            )
