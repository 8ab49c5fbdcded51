"""Flip aggregation, ROC/GAR accounting, moments, reports, and the sweep."""

import csv
import math

import numpy as np
import pytest
import scipy.stats

from util import jittered_params, make_dataset, small_config

from gaussmetric.config import TrainConfig
from gaussmetric.errors import DatasetError, InsufficientBatchError
from gaussmetric.evaluation import (
    FAR_TARGETS,
    HISTOGRAM_BINS,
    EvalPair,
    MomentSummary,
    aggregate,
    aggregate_batch,
    diagnose_sweep,
    evaluate_pairs,
    read_pairs_file,
    roc_curve,
    sample_eval_pairs,
    verify,
    write_report,
    write_sweep,
)
from gaussmetric.model import pair_forward_np
from gaussmetric.targets import DecisionRule, TargetSpec


def brute_roc(matching, non_matching):
    """Count-based reference: one point per distinct pooled score."""
    thresholds = sorted(set(matching) | set(non_matching), reverse=True)
    points = []
    for t in thresholds:
        far = sum(1 for v in non_matching if v > t) / len(non_matching)
        gar = sum(1 for v in matching if v > t) / len(matching)
        points.append((t, far, gar))
    return points


def brute_gar_at(points, alpha):
    feasible = [g for _, f, g in points if f <= alpha]
    return max(feasible) if feasible else 0.0


class TestRocCurve:
    def test_worked_example(self):
        points, gar_at = roc_curve([5.0, 3.0, 1.0], [0.0, 2.0, 4.0])
        got = [(pt.threshold, pt.far, pt.gar) for pt in points]
        want = [
            (5.0, 0.0, 0.0),
            (4.0, 0.0, 1 / 3),
            (3.0, 1 / 3, 1 / 3),
            (2.0, 1 / 3, 2 / 3),
            (1.0, 2 / 3, 2 / 3),
            (0.0, 2 / 3, 1.0),
        ]
        for (t, f, g), (wt, wf, wg) in zip(got, want):
            assert t == wt
            assert f == pytest.approx(wf, abs=1e-12)
            assert g == pytest.approx(wg, abs=1e-12)
        # reading the curve at a loose budget: the last point still under
        # FAR 1/3 sits at threshold 2 and grants two thirds of the pairs;
        # slack because 1 - 2/3 lands an ulp above 1/3
        loose = [pt for pt in points if pt.far <= 1 / 3 + 1e-12][-1]
        assert loose.threshold == 2.0
        assert loose.gar == pytest.approx(2 / 3, abs=1e-12)
        # the default budgets are stricter than any nonzero empirical FAR
        # here, so both stop at threshold 4
        assert gar_at[1e-2] == pytest.approx(1 / 3, abs=1e-12)
        assert gar_at[1e-3] == pytest.approx(1 / 3, abs=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(8)
        for _ in range(25):
            n_m = int(rng.integers(1, 40))
            n_n = int(rng.integers(1, 40))
            # coarse grid forces ties across and within classes
            m = rng.integers(-5, 6, size=n_m).astype(float)
            n = rng.integers(-5, 6, size=n_n).astype(float)
            points, gar_at = roc_curve(m, n)
            want = brute_roc(m.tolist(), n.tolist())
            assert len(points) == len(want)
            for pt, (t, f, g) in zip(points, want):
                assert pt.threshold == t
                assert pt.far == pytest.approx(f, abs=1e-12)
                assert pt.gar == pytest.approx(g, abs=1e-12)
            for alpha in FAR_TARGETS:
                assert gar_at[alpha] == pytest.approx(
                    brute_gar_at(want, alpha), abs=1e-12
                )

    def test_duplicate_scores_collapse_to_one_point(self):
        points, _ = roc_curve([1.0, 1.0, 2.0], [1.0, 0.0, 0.0])
        assert [pt.threshold for pt in points] == [2.0, 1.0, 0.0]

    def test_identical_multisets_track_diagonal(self):
        scores = [0.5, 1.5, 1.5, 3.0]
        points, _ = roc_curve(scores, scores)
        for pt in points:
            assert pt.far == pt.gar

    def test_separated_classes_reach_perfect_corner(self):
        points, gar_at = roc_curve([10.0, 11.0, 12.0], [1.0, 2.0, 3.0])
        assert any(pt.far == 0.0 and pt.gar == 1.0 for pt in points)
        assert gar_at[1e-2] == 1.0
        assert gar_at[1e-3] == 1.0

    def test_empty_class_rejected(self):
        with pytest.raises(InsufficientBatchError):
            roc_curve([], [1.0])
        with pytest.raises(InsufficientBatchError):
            roc_curve([1.0], [])


class TestMomentSummary:
    def test_matches_scipy(self):
        rng = np.random.default_rng(2)
        values = rng.gamma(2.0, size=500)
        m = MomentSummary.from_values(values)
        assert m.count == 500
        assert m.mean == pytest.approx(values.mean())
        assert m.variance == pytest.approx(np.var(values))  # population
        assert m.skewness == pytest.approx(scipy.stats.skew(values), abs=1e-12)
        assert m.kurtosis == pytest.approx(
            scipy.stats.kurtosis(values, fisher=False), abs=1e-12
        )
        assert not m.degenerate

    def test_two_point_lattice(self):
        m = MomentSummary.from_values([-1.0, 1.0, -1.0, 1.0])
        assert m.mean == 0.0
        assert m.variance == 1.0
        assert m.skewness == 0.0
        assert m.kurtosis == 1.0

    def test_large_gaussian_sample(self):
        rng = np.random.default_rng(5)
        m = MomentSummary.from_values(rng.normal(size=100_000))
        assert abs(m.skewness) < 0.05
        assert abs(m.kurtosis - 3.0) < 0.1

    def test_degenerate_sample(self):
        m = MomentSummary.from_values(np.full(10, 2.5))
        assert m.degenerate
        assert m.variance == 0.0
        assert math.isnan(m.skewness)
        assert math.isnan(m.kurtosis)

    def test_too_few_samples(self):
        with pytest.raises(InsufficientBatchError):
            MomentSummary.from_values([1.0, 2.0, 3.0])


@pytest.fixture
def scorer():
    dataset = make_dataset([6, 6, 6], input_dim=8, seed=3)
    params = jittered_params(small_config(), scale=0.3, seed=11)
    return dataset, params


class TestAggregation:
    def test_contribution_order_and_mean(self, scorer):
        dataset, params = scorer
        x1 = dataset.features[:5].astype(np.float64)
        x2 = dataset.features[5:10].astype(np.float64)
        z_all, z_bar = aggregate_batch(params, dataset, x1, x2)
        assert z_all.shape == (4, 5, 1)
        f1, f2 = dataset.flip(x1), dataset.flip(x2)
        np.testing.assert_array_equal(z_all[0], pair_forward_np(params, x1, x2))
        np.testing.assert_array_equal(z_all[1], pair_forward_np(params, f1, x2))
        np.testing.assert_array_equal(z_all[2], pair_forward_np(params, x1, f2))
        np.testing.assert_array_equal(z_all[3], pair_forward_np(params, f1, f2))
        np.testing.assert_array_equal(z_bar, z_all.mean(axis=0))

    def test_orientation_invariance(self, scorer):
        # flipping either input permutes the four contributions, so the
        # aggregate may move only by summation-order rounding
        dataset, params = scorer
        x1 = dataset.features[0].astype(np.float64)
        x2 = dataset.features[7].astype(np.float64)
        base = aggregate(params, dataset, x1, x2).z_bar
        for a, b in [
            (dataset.flip(x1), x2),
            (x1, dataset.flip(x2)),
            (dataset.flip(x1), dataset.flip(x2)),
        ]:
            other = aggregate(params, dataset, a, b).z_bar
            np.testing.assert_allclose(other, base, rtol=1e-12, atol=1e-12)

    def test_verify_label_follows_margin(self, scorer):
        dataset, params = scorer
        targets = TargetSpec()
        rule = DecisionRule(targets)
        for i, j in [(0, 1), (0, 7), (3, 14), (10, 11), (2, 16)]:
            x1 = dataset.features[i].astype(np.float64)
            x2 = dataset.features[j].astype(np.float64)
            matching, margin, agg = verify(params, dataset, x1, x2, targets)
            assert matching == (margin > 0.0)
            assert margin == pytest.approx(float(rule.margin(agg.z_bar)[0]))
            assert agg.contributions.shape == (4, 1)


class TestEvaluatePairs:
    def test_report_against_manual_scoring(self, scorer):
        dataset, params = scorer
        targets = TargetSpec()
        rng = np.random.default_rng(4)
        pairs = sample_eval_pairs(dataset, 12, 15, rng)
        report = evaluate_pairs(params, dataset, pairs, targets)
        assert report.n_matching == 12
        assert report.n_non_matching == 15

        rule = DecisionRule(targets)
        correct = 0
        for pair in pairs:
            x1 = dataset.features[pair.idx1].astype(np.float64)
            x2 = dataset.features[pair.idx2].astype(np.float64)
            margin = float(rule.margin(aggregate(params, dataset, x1, x2).z_bar)[0])
            correct += (margin > 0.0) == pair.matching
        assert report.accuracy == pytest.approx(correct / len(pairs))

        for stat in ("z", "z_bar"):
            hist = report.histograms[stat]
            assert hist.edges.size == HISTOGRAM_BINS + 1
            assert hist.matching.sum() == 12
            assert hist.non_matching.sum() == 15

    def test_chunking_is_invisible(self, scorer):
        # chunked matmuls can shift z-bar by an ulp, so compare to 1e-12
        # instead of bitwise
        dataset, params = scorer
        targets = TargetSpec()
        pairs = sample_eval_pairs(dataset, 8, 8, np.random.default_rng(9))
        a = evaluate_pairs(params, dataset, pairs, targets, chunk=3)
        b = evaluate_pairs(params, dataset, pairs, targets, chunk=1024)
        assert a.accuracy == b.accuracy
        assert len(a.roc) == len(b.roc)
        for pa, pb in zip(a.roc, b.roc):
            assert pa.threshold == pytest.approx(pb.threshold, abs=1e-12)
            assert pa.far == pytest.approx(pb.far, abs=1e-12)
            assert pa.gar == pytest.approx(pb.gar, abs=1e-12)
        assert a.gar_at_far.keys() == b.gar_at_far.keys()
        for alpha in a.gar_at_far:
            assert a.gar_at_far[alpha] == pytest.approx(
                b.gar_at_far[alpha], abs=1e-12
            )
        for stat in ("z", "z_bar"):
            for cls in ("matching", "non_matching"):
                ma = a.moments[stat][cls]
                mb = b.moments[stat][cls]
                assert ma.count == mb.count
                for field in ("mean", "variance", "skewness", "kurtosis"):
                    assert getattr(ma, field) == pytest.approx(
                        getattr(mb, field), rel=1e-9, abs=1e-12
                    )

    def test_multidimensional_outputs_use_scalar_view(self):
        dataset = make_dataset([6, 6], input_dim=8, seed=6)
        params = jittered_params(small_config(p=2), scale=0.3, seed=12)
        targets = TargetSpec(p=2)
        pairs = sample_eval_pairs(dataset, 6, 6, np.random.default_rng(1))
        report = evaluate_pairs(params, dataset, pairs, targets)

        x1 = dataset.features[[p.idx1 for p in pairs]].astype(np.float64)
        x2 = dataset.features[[p.idx2 for p in pairs]].astype(np.float64)
        z_all, _ = aggregate_batch(params, dataset, x1, x2)
        scalars = z_all[0].mean(axis=1)
        labels = np.array([p.matching for p in pairs])
        assert report.moments["z"]["matching"].mean == pytest.approx(
            scalars[labels].mean()
        )
        assert report.moments["z"]["non_matching"].mean == pytest.approx(
            scalars[~labels].mean()
        )

    def test_empty_and_single_class_rejected(self, scorer):
        dataset, params = scorer
        with pytest.raises(DatasetError):
            evaluate_pairs(params, dataset, [], TargetSpec())
        only_m = [EvalPair(0, 1, True), EvalPair(1, 2, True)]
        with pytest.raises(DatasetError, match="both classes"):
            evaluate_pairs(params, dataset, only_m, TargetSpec())


class TestSampleEvalPairs:
    def test_counts_labels_distinctness(self):
        dataset = make_dataset([5, 5, 5], input_dim=4, seed=0)
        pairs = sample_eval_pairs(dataset, 20, 25, np.random.default_rng(3))
        matching = [p for p in pairs if p.matching]
        non_matching = [p for p in pairs if not p.matching]
        assert len(matching) == 20
        assert len(non_matching) == 25
        for p in pairs:
            assert p.idx1 != p.idx2
            same = dataset.ids[p.idx1] == dataset.ids[p.idx2]
            assert bool(same) == p.matching
        for group in (matching, non_matching):
            keys = {frozenset((p.idx1, p.idx2)) for p in group}
            assert len(keys) == len(group)

    def test_deterministic_given_seed(self):
        dataset = make_dataset([5, 5], input_dim=4, seed=0)
        a = sample_eval_pairs(dataset, 6, 6, np.random.default_rng(7))
        b = sample_eval_pairs(dataset, 6, 6, np.random.default_rng(7))
        assert a == b

    def test_matching_universe_exhausted(self):
        dataset = make_dataset([2, 2], input_dim=4)
        with pytest.raises(DatasetError, match="universe"):
            sample_eval_pairs(dataset, 5, 1, np.random.default_rng(0))

    def test_single_identity_has_no_non_matching(self):
        dataset = make_dataset([6], input_dim=4)
        with pytest.raises(DatasetError, match="2 identities"):
            sample_eval_pairs(dataset, 2, 2, np.random.default_rng(0))

    def test_singleton_identities_have_no_matching(self):
        dataset = make_dataset([1, 1], input_dim=4)
        with pytest.raises(DatasetError, match="2 images"):
            sample_eval_pairs(dataset, 1, 1, np.random.default_rng(0))


class TestPairsFile:
    def test_good_file(self, tmp_path):
        dataset = make_dataset([3, 3], input_dim=4)
        path = tmp_path / "pairs.txt"
        path.write_text(
            "# verification pairs\n"
            "0 1 1\n"
            "\n"
            "0 3 0  # cross identity\n"
            "2 1 1\n"
        )
        pairs = read_pairs_file(path, dataset)
        assert pairs == [
            EvalPair(0, 1, True),
            EvalPair(0, 3, False),
            EvalPair(2, 1, True),
        ]

    @pytest.mark.parametrize(
        "line, fragment",
        [
            ("0 1", "expected"),
            ("0 1 1 1", "expected"),
            ("zero 1 1", "non-integer"),
            ("0 99 0", "out of range"),
            ("0 1 2", "label must be"),
            ("0 3 1", "contradicts"),
        ],
    )
    def test_bad_lines(self, tmp_path, line, fragment):
        dataset = make_dataset([3, 3], input_dim=4)
        path = tmp_path / "pairs.txt"
        path.write_text(line + "\n")
        with pytest.raises(DatasetError, match=fragment):
            read_pairs_file(path, dataset)

    def test_line_numbers_in_errors(self, tmp_path):
        dataset = make_dataset([3, 3], input_dim=4)
        path = tmp_path / "pairs.txt"
        path.write_text("0 1 1\n# fine\nbroken\n")
        with pytest.raises(DatasetError, match=":3:"):
            read_pairs_file(path, dataset)


class TestReportFiles:
    def test_write_report_layout(self, scorer, tmp_path):
        dataset, params = scorer
        pairs = sample_eval_pairs(dataset, 10, 10, np.random.default_rng(2))
        report = evaluate_pairs(params, dataset, pairs, TargetSpec())
        files = write_report(report, tmp_path / "report")
        assert set(files) == {
            "roc",
            "moments",
            "histogram_z",
            "histogram_zbar",
            "summary",
        }
        for path in files.values():
            assert path.exists()

        with open(files["roc"], newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["threshold", "far", "gar"]
        thresholds = [float(r[0]) for r in rows[1:]]
        assert thresholds == sorted(thresholds, reverse=True)

        summary = dict(
            row for row in csv.reader(open(files["summary"], newline=""))
        )
        assert float(summary["accuracy"]) == pytest.approx(report.accuracy)
        assert "gar_at_far_0.01" in summary
        assert "gar_at_far_0.001" in summary

        with open(files["moments"], newline="") as fh:
            moment_rows = list(csv.reader(fh))
        assert moment_rows[0][0] == "statistic"
        assert len(moment_rows) == 1 + 4  # z / z_bar x matching / non_matching


class TestDiagnoseSweep:
    def test_grid_with_one_invalid_point(self, tmp_path):
        dataset = make_dataset([10, 10, 10], input_dim=8, seed=0)
        rows = diagnose_sweep(
            dataset,
            small_config(),
            TargetSpec(),
            TrainConfig(b=8, max_iterations=30, candidates_per_epoch=2000),
            [0.0, 8.0],
            tmp_path / "sweep",
            n_eval_pairs=50,
        )
        assert [row.w for row in rows] == [0.0, 8.0]
        # w = 0 collides with the matching mean: rejected before training
        assert not rows[0].ok
        assert math.isnan(rows[0].accuracy)
        # w = 8 produces a trained model and real metrics, even if the run
        # stopped early
        assert not math.isnan(rows[1].accuracy)
        assert 0.0 <= rows[1].accuracy <= 1.0

        out = tmp_path / "sweep.csv"
        write_sweep(rows, out)
        with open(out, newline="") as fh:
            written = list(csv.reader(fh))
        assert written[0][0] == "w"
        assert len(written) == 3
