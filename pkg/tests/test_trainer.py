"""Optimizer updates and the training loop's control flow."""

import csv
import warnings

import numpy as np
import pytest

from util import make_dataset, small_config

from gaussmetric.config import TrainConfig
from gaussmetric.dataio import load_checkpoint
from gaussmetric.errors import ConfigError, DatasetError
from gaussmetric.model import init_params
from gaussmetric.targets import TargetSpec
from gaussmetric.trainer import AdamState, adam_step, train


def reference_adam(arrays, grad_seq, lr, config, decay_flags):
    """Textbook Adam recurrence, written independently of the trainer."""
    m = [np.zeros_like(a) for a in arrays]
    v = [np.zeros_like(a) for a in arrays]
    theta = [a.copy() for a in arrays]
    for t, grads in enumerate(grad_seq, start=1):
        for i, g in enumerate(grads):
            m[i] = config.beta1 * m[i] + (1 - config.beta1) * g
            v[i] = config.beta2 * v[i] + (1 - config.beta2) * g * g
            m_hat = m[i] / (1 - config.beta1**t)
            v_hat = v[i] / (1 - config.beta2**t)
            theta[i] = theta[i] - lr * m_hat / (np.sqrt(v_hat) + config.eps)
            if decay_flags[i] and config.weight_decay > 0:
                theta[i] = theta[i] - lr * config.weight_decay * theta[i]
    return theta


class TestAdamStep:
    def test_first_step_is_signed_learning_rate(self):
        config = small_config(input_dim=2, feature_widths=(2,), d=1)
        params = init_params(config)
        params.feature_layers[0].w[:] = 0.0
        state = AdamState.zeros_like(params)
        grads = [np.zeros_like(a) for _, a, _ in params.arrays()]
        grads[0][:] = 0.5
        adam_step(params, grads, state, lr=0.01, config=TrainConfig(weight_decay=0.0))
        # bias corrections cancel at t = 1: update = lr * g / (|g| + eps)
        assert np.allclose(params.feature_layers[0].w, -0.01, atol=1e-6)

    def test_matches_reference_recurrence(self):
        config = small_config(input_dim=3, feature_widths=(4,), d=2)
        params = init_params(config)
        train_config = TrainConfig()
        entries = params.arrays()
        decay_flags = [is_w for _, _, is_w in entries]
        rng = np.random.default_rng(0)
        grad_seq = [
            [rng.normal(size=a.shape) for _, a, _ in entries] for _ in range(5)
        ]
        expected = reference_adam(
            [a for _, a, _ in entries], grad_seq, 0.01, train_config, decay_flags
        )
        state = AdamState.zeros_like(params)
        for grads in grad_seq:
            adam_step(params, grads, state, lr=0.01, config=train_config)
        for (_, actual, _), want in zip(params.arrays(), expected):
            np.testing.assert_allclose(actual, want, atol=1e-12)
        assert state.t == 5

    def test_zero_gradient_keeps_params(self):
        config = small_config(input_dim=2, feature_widths=(3,), d=2)
        params = init_params(config)
        before = params.copy()
        state = AdamState.zeros_like(params)
        grads = [np.zeros_like(a) for _, a, _ in params.arrays()]
        adam_step(params, grads, state, lr=0.01, config=TrainConfig(weight_decay=0.0))
        for (_, a, _), (_, b, _) in zip(params.arrays(), before.arrays()):
            assert np.array_equal(a, b)

    def test_decay_spares_biases(self):
        config = small_config(input_dim=2, feature_widths=(3,), d=2)
        params = init_params(config)
        for _, arr, _ in params.arrays():
            arr[:] = 1.0
        state = AdamState.zeros_like(params)
        grads = [np.zeros_like(a) for _, a, _ in params.arrays()]
        adam_step(
            params,
            grads,
            state,
            lr=0.01,
            config=TrainConfig(weight_decay=0.1),
        )
        for _, arr, is_weight in params.arrays():
            if is_weight:
                assert np.allclose(arr, 1.0 - 0.01 * 0.1)
            else:
                assert np.all(arr == 1.0)

    def test_gradient_count_mismatch(self):
        params = init_params(small_config())
        state = AdamState.zeros_like(params)
        with pytest.raises(ConfigError):
            adam_step(params, [np.zeros((1, 1))], state, 0.01, TrainConfig())


@pytest.fixture
def quick_setup():
    dataset = make_dataset([10, 10, 10], input_dim=8, seed=0)
    return dataset, small_config(), TargetSpec()


class TestTrainLoop:
    def test_loss_trend_downward(self, tmp_path):
        # two identities, default batch size, modest budget: the logged
        # total loss must trend down (first decile vs last decile means)
        dataset = make_dataset([20, 20], input_dim=16, seed=4)
        result = train(
            dataset,
            small_config(input_dim=16),
            TargetSpec(),
            TrainConfig(max_iterations=200, seed=0),
            tmp_path / "run",
        )
        assert result.steps == 200
        totals = [row.loss.total for row in result.rows]
        decile = max(len(totals) // 10, 1)
        assert np.mean(totals[-decile:]) < np.mean(totals[:decile])

    def test_deterministic_runs_bit_identical(self, quick_setup, tmp_path):
        dataset, config, targets = quick_setup
        tc = TrainConfig(b=8, max_iterations=60, seed=5, candidates_per_epoch=2000)
        a = train(dataset, config, targets, tc, tmp_path / "a")
        b = train(dataset, config, targets, tc, tmp_path / "b")
        assert a.final_checkpoint.read_bytes() == b.final_checkpoint.read_bytes()
        assert (tmp_path / "a" / "log.csv").read_text() == (
            tmp_path / "b" / "log.csv"
        ).read_text()

    def test_zero_iterations_returns_initialization(self, quick_setup, tmp_path):
        dataset, config, targets = quick_setup
        result = train(
            dataset,
            config,
            targets,
            TrainConfig(max_iterations=0),
            tmp_path / "run",
        )
        assert result.steps == 0
        assert result.stop_reason == "completed"
        stored = load_checkpoint(result.final_checkpoint)
        reference = init_params(config)
        for (_, a, _), (_, b, _) in zip(
            stored.params.arrays(), reference.arrays()
        ):
            assert np.array_equal(a, b)

    def test_resume_uses_given_weights(self, quick_setup, tmp_path):
        dataset, config, targets = quick_setup
        warm = init_params(small_config(seed=9))
        result = train(
            dataset,
            config,
            targets,
            TrainConfig(max_iterations=0),
            tmp_path / "run",
            resume_params=warm,
        )
        for (_, a, _), (_, b, _) in zip(
            result.params.arrays(), warm.arrays()
        ):
            assert np.array_equal(a, b)
        # and the caller's copy is not aliased
        result.params.feature_layers[0].w[:] = 0.0
        assert not np.all(warm.feature_layers[0].w == 0.0)

    def test_cold_start_steps_through_initial_starvation(
        self, quick_setup, tmp_path
    ):
        # a fresh network has no difficult matching pairs, so the first
        # organic fill fails; the ranking fallback must still produce
        # optimizer steps and hand over to standard mining
        dataset, config, targets = quick_setup
        result = train(
            dataset,
            config,
            targets,
            TrainConfig(b=8, max_iterations=30, seed=0, candidates_per_epoch=2000),
            tmp_path / "run",
        )
        assert result.steps == 30
        assert result.stop_reason == "completed"
        assert result.rows[0].discards >= 1

    def test_log_file_matches_rows(self, quick_setup, tmp_path):
        dataset, config, targets = quick_setup
        tc = TrainConfig(b=8, max_iterations=25, seed=1, candidates_per_epoch=2000)
        result = train(dataset, config, targets, tc, tmp_path / "run")
        with open(result.log_path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == [
            "step",
            "epoch",
            "lr",
            "loss_m",
            "loss_n",
            "total",
            "difficult_fraction_m",
            "difficult_fraction_n",
            "discards",
        ]
        assert len(rows) - 1 == result.steps
        for row, logged in zip(result.rows, rows[1:]):
            assert int(logged[0]) == row.step
            assert float(logged[2]) == pytest.approx(tc.lr_at(row.epoch))

    def test_checkpoint_cadence(self, quick_setup, tmp_path):
        dataset, config, targets = quick_setup
        train(
            dataset,
            config,
            targets,
            TrainConfig(
                b=8,
                max_iterations=10,
                checkpoint_every=5,
                candidates_per_epoch=2000,
            ),
            tmp_path / "run",
        )
        assert (tmp_path / "run" / "checkpoint_0000005.ckpt").exists()
        assert (tmp_path / "run" / "checkpoint_0000010.ckpt").exists()

    def test_numeric_abort_keeps_last_params(self, quick_setup, tmp_path):
        dataset, config, targets = quick_setup
        poisoned = init_params(config)
        for _, arr, is_weight in poisoned.arrays():
            if is_weight:
                arr *= 1e200
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            result = train(
                dataset,
                config,
                targets,
                TrainConfig(b=8, max_iterations=10, candidates_per_epoch=2000),
                tmp_path / "run",
                resume_params=poisoned,
            )
        assert result.stop_reason == "numeric"
        assert result.steps == 0
        assert result.final_checkpoint.exists()


class TestPreconditions:
    def test_input_dim_mismatch(self, tmp_path):
        dataset = make_dataset([4, 4], input_dim=8)
        with pytest.raises(ConfigError):
            train(
                dataset,
                small_config(input_dim=12),
                TargetSpec(),
                TrainConfig(),
                tmp_path,
            )

    def test_output_dim_mismatch(self, tmp_path):
        dataset = make_dataset([4, 4], input_dim=8)
        with pytest.raises(ConfigError):
            train(
                dataset,
                small_config(p=2),
                TargetSpec(p=1),
                TrainConfig(),
                tmp_path,
            )

    def test_unequal_sigma_needs_override(self, tmp_path):
        dataset = make_dataset([4, 4], input_dim=8)
        targets = TargetSpec(sigma_m=1.0, sigma_n=3.0)
        with pytest.raises(ConfigError):
            train(dataset, small_config(), targets, TrainConfig(), tmp_path)
        result = train(
            dataset,
            small_config(),
            targets,
            TrainConfig(b=4, max_iterations=2, allow_unequal_sigma=True),
            tmp_path / "ok",
        )
        assert result.steps <= 2

    def test_single_identity_rejected(self, tmp_path):
        dataset = make_dataset([8], input_dim=8)
        with pytest.raises(DatasetError):
            train(dataset, small_config(), TargetSpec(), TrainConfig(), tmp_path)

    def test_too_few_images_rejected(self, tmp_path):
        dataset = make_dataset([1, 1, 4], input_dim=8)
        with pytest.raises(DatasetError):
            train(dataset, small_config(), TargetSpec(), TrainConfig(), tmp_path)

    def test_starved_dataset_raises_when_nothing_ever_steps(self, tmp_path):
        # 2 identities x 2 images cannot fill b/2 = 10 matching pairs:
        # every epoch discards, the fallback cannot fill either, and the
        # run must fail loudly rather than spin
        dataset = make_dataset([2, 2], input_dim=8)
        with pytest.raises(DatasetError, match="consecutive"):
            train(
                dataset,
                small_config(),
                TargetSpec(),
                TrainConfig(b=20, max_iterations=50, candidates_per_epoch=200),
                tmp_path,
            )
