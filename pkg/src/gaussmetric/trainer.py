"""End-to-end optimization of the siamese metric model.

One iteration = one non-discarded batch: mine a difficult batch under the
frozen parameter snapshot, re-run it in train mode on a fresh tape, take
the KL loss against both targets, backprop, and apply a bias-corrected
Adam update with decoupled weight decay on the weight matrices. Epochs are
passes over resampled candidate streams; the learning rate decays per the
epoch schedule.

Failure policy, in increasing severity: a non-finite gradient skips the
step; a non-finite forward aborts the run keeping the last good
parameters; repeated failure to fill a batch (``livelock_limit``
consecutive discards) stops the run, or raises when not a single step ever
succeeded.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .config import TrainConfig
from .dataio import Dataset, save_checkpoint
from .errors import ConfigError, DatasetError, NumericError
from .kl_loss import LossBreakdown, total_loss
from .mining import MiningStats, bootstrap_batches, fill_batch, sample_epoch
from .model import (
    ModelConfig,
    ModelParams,
    bind_params,
    dropout_mask,
    encode,
    init_params,
    metric,
)
from .targets import TargetSpec

log = logging.getLogger(__name__)

LOG_COLUMNS = [
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


@dataclass
class AdamState:
    """First/second moment accumulators, aligned with the parameter order."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        arrays = [a for _, a, _ in params.arrays()]
        return cls(
            m=[np.zeros_like(a) for a in arrays],
            v=[np.zeros_like(a) for a in arrays],
        )


def adam_step(
    params: ModelParams,
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    config: TrainConfig,
) -> None:
    """In-place bias-corrected Adam update.

    Weight decay is decoupled (theta -= lr * wd * theta), applied to weight
    matrices only, never to biases.
    """
    entries = params.arrays()
    if len(grads) != len(entries):
        raise ConfigError(
            f"got {len(grads)} gradients for {len(entries)} parameter arrays"
        )
    state.t += 1
    bc1 = 1.0 - config.beta1**state.t
    bc2 = 1.0 - config.beta2**state.t
    for i, ((_, theta, is_weight), g) in enumerate(zip(entries, grads)):
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        theta -= lr * m_hat / (np.sqrt(v_hat) + config.eps)
        if is_weight and config.weight_decay > 0.0:
            theta -= lr * config.weight_decay * theta


@dataclass
class LogRow:
    step: int
    epoch: int
    lr: float
    loss: LossBreakdown
    stats: MiningStats
    discards: int

    def as_csv(self) -> list:
        return [
            self.step,
            self.epoch,
            f"{self.lr:.10g}",
            f"{self.loss.loss_m:.10g}",
            f"{self.loss.loss_n:.10g}",
            f"{self.loss.total:.10g}",
            f"{self.stats.fraction_m:.6f}",
            f"{self.stats.fraction_n:.6f}",
            self.discards,
        ]


@dataclass
class TrainResult:
    params: ModelParams
    steps: int
    epochs: int
    stop_reason: str  # completed | livelock | numeric
    final_checkpoint: Path
    log_path: Path
    rows: list[LogRow] = field(repr=False, default_factory=list)


def _sanity_check(
    dataset: Dataset, model: ModelConfig, targets: TargetSpec, train: TrainConfig
) -> None:
    if dataset.input_dim != model.input_dim:
        raise ConfigError(
            f"dataset items have {dataset.input_dim} entries, model expects "
            f"{model.input_dim}"
        )
    if model.p != targets.p:
        raise ConfigError(
            f"model emits {model.p}-dimensional outputs, targets expect {targets.p}"
        )
    if not targets.equal_sigma and not train.allow_unequal_sigma:
        raise ConfigError(
            f"unequal target sigmas ({targets.sigma_m} vs {targets.sigma_n}) "
            "break the linear decision rule; set allow_unequal_sigma to "
            "override"
        )
    rich = sum(
        1
        for identity in range(dataset.n_identities)
        if dataset.items_of(identity).size >= train.min_images
    )
    if rich < 2:
        raise DatasetError(
            f"need >= 2 identities with >= {train.min_images} images to form "
            f"both pair classes, found {rich}"
        )


def _forward(tape, params, batch, targets, masks):
    bound = bind_params(tape, params)
    xm1, xm2, xn1, xn2 = batch.matrices()
    inputs = [tape.leaf(x, op="input") for x in (xm1, xm2, xn1, xn2)]
    feats = [
        encode(tape, bound, node, mask) for node, mask in zip(inputs, masks)
    ]
    z_m = metric(tape, bound, feats[0], feats[1])
    z_n = metric(tape, bound, feats[2], feats[3])
    node, breakdown = total_loss(tape, z_m, z_n, targets)
    return bound, node, breakdown


def train(
    dataset: Dataset,
    model_config: ModelConfig,
    targets: TargetSpec,
    train_config: TrainConfig,
    output_dir,
    resume_params: ModelParams | None = None,
) -> TrainResult:
    """Run the full loop; returns the final parameters and run record.

    ``resume_params`` warm-starts from existing weights (optimizer state
    always starts fresh; checkpoints do not carry it). Deterministic for a
    fixed (dataset, configs) tuple.
    """
    _sanity_check(dataset, model_config, targets, train_config)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)

    if resume_params is None:
        params = init_params(model_config)
    else:
        params = resume_params.copy()
    state = AdamState.zeros_like(params)
    drop_rng = np.random.default_rng([train_config.seed, 23])
    mask_width = (
        model_config.feature_widths[-1]
        if model_config.feature_widths
        else model_config.input_dim
    )
    half = train_config.b // 2

    rows: list[LogRow] = []
    step = 0
    epoch = 0
    stream = None
    warm = False  # a standard fill has succeeded at least once
    consecutive_discards = 0
    consecutive_grad_skips = 0
    pending_discards = 0
    stop_reason = "completed"
    started = time.monotonic()

    log_path = out / "log.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)

        def do_step(batch, stats) -> str:
            """One forward/backward/update; returns ok | skip | abort."""
            nonlocal step, pending_discards, consecutive_grad_skips
            if model_config.dropout_keep < 1.0:
                # One mask per encode pass, shared across the rows: per-row
                # masks would leak independent noise into the batch moments
                # the loss is built on, which at b/2 rows swamps the variance
                # estimate.
                masks = [
                    dropout_mask(
                        drop_rng, (1, mask_width), model_config.dropout_keep
                    )
                    for _ in range(4)
                ]
            else:
                masks = [None] * 4

            tape = Tape()
            try:
                bound, loss_node, breakdown = _forward(
                    tape, params, batch, targets, masks
                )
            except NumericError as exc:
                log.error(
                    "aborting run, non-finite forward at step %d: %s", step, exc
                )
                return "abort"

            tape.backward(loss_node)
            grads = [tape.grad(leaf) for leaf in bound.leaves()]
            if not all(np.all(np.isfinite(g)) for g in grads):
                consecutive_grad_skips += 1
                log.warning("skipping step %d: non-finite gradient", step)
                if consecutive_grad_skips >= train_config.livelock_limit:
                    log.error(
                        "stopping after %d consecutive gradient failures",
                        consecutive_grad_skips,
                    )
                    return "abort"
                return "skip"
            consecutive_grad_skips = 0

            lr = train_config.lr_at(epoch)
            adam_step(params, grads, state, lr, train_config)
            step += 1

            row = LogRow(
                step=step,
                epoch=epoch,
                lr=lr,
                loss=breakdown,
                stats=stats,
                discards=pending_discards,
            )
            pending_discards = 0
            rows.append(row)
            writer.writerow(row.as_csv())

            if step % train_config.checkpoint_every == 0:
                save_checkpoint(
                    out / f"checkpoint_{step:07d}.ckpt",
                    params,
                    model_config,
                    targets,
                    train_config,
                )
            return "ok"

        while step < train_config.max_iterations:
            if stream is None:
                stream = sample_epoch(
                    dataset,
                    train_config,
                    np.random.default_rng([train_config.seed, 17, epoch]),
                )
            batch, stats = fill_batch(
                stream, dataset, params, targets, train_config.b
            )
            if batch is not None:
                warm = True
                consecutive_discards = 0
                if do_step(batch, stats) == "abort":
                    stop_reason = "numeric"
                    break
                continue

            # stream exhausted mid-fill: discard, move to the next epoch
            consecutive_discards += 1
            pending_discards += 1
            failed_epoch = epoch
            stream = None
            epoch += 1
            log.debug(
                "discarded batch (%d consecutive), scored %d candidates "
                "(difficult %d m / %d n)",
                consecutive_discards,
                stats.candidates_seen,
                stats.difficult_m,
                stats.difficult_n,
            )

            if not warm:
                # Cold start: until the standard fill works once, step on the
                # most-deviant candidates so the outputs can spread enough for
                # real difficult pairs to exist. See bootstrap_batches.
                boot = bootstrap_batches(
                    sample_epoch(
                        dataset,
                        train_config,
                        np.random.default_rng(
                            [train_config.seed, 17, failed_epoch]
                        ),
                    ),
                    dataset,
                    params,
                    targets,
                    train_config.b,
                )
                if boot:
                    consecutive_discards = 0
                    log.info(
                        "cold start at epoch %d: %d bootstrap batch(es)",
                        failed_epoch,
                        len(boot),
                    )
                    aborted = False
                    for extra in boot:
                        if step >= train_config.max_iterations:
                            break
                        if do_step(extra, stats) == "abort":
                            aborted = True
                            break
                    if aborted:
                        stop_reason = "numeric"
                        break
                    continue

            if consecutive_discards >= train_config.livelock_limit:
                if step == 0:
                    raise DatasetError(
                        f"{consecutive_discards} consecutive discarded "
                        "batches and no successful step: the dataset "
                        "cannot supply difficult pairs of both classes"
                    )
                log.error(
                    "stopping after %d consecutive discarded batches "
                    "at step %d",
                    consecutive_discards,
                    step,
                )
                stop_reason = "livelock"
                break

    final_path = out / "final.ckpt"
    if params.all_finite():
        save_checkpoint(final_path, params, model_config, targets, train_config)
    else:
        # never leave a poisoned final checkpoint behind
        log.error("final parameters are non-finite; final checkpoint not written")

    log.info(
        "run finished: %d steps, %d epochs, %s, %.1fs",
        step,
        epoch,
        stop_reason,
        time.monotonic() - started,
    )
    return TrainResult(
        params=params,
        steps=step,
        epochs=epoch,
        stop_reason=stop_reason,
        final_checkpoint=final_path,
        log_path=log_path,
        rows=rows,
    )
