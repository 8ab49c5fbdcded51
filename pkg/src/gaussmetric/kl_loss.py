"""KL divergence between batch statistics and the Gaussian targets.

The batch of metric outputs is summarized by its per-dimension sample mean
and population variance, treated as a diagonal Gaussian, and penalized by
the closed-form KL divergence onto the isotropic target. Direction is
KL(sample || target).

Two routes exist on purpose: :func:`kl_diag` / :func:`kl_full` are plain
numpy (used as references and for reporting), while :func:`kl_loss_node`
builds the same diagonal expression on a :class:`~gaussmetric.autodiff.Tape`
for training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Tape
from .errors import InsufficientBatchError, NumericError, ShapeError
from .targets import TargetSpec

# Variances below this are clamped before the log; keeps a collapsed batch
# dimension from producing -inf while leaving the trace term untouched.
VARIANCE_FLOOR = 1e-8


def batch_moments(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and population (1/b) variance of a batch.

    ``z`` is (b, p) with b >= 2; one sample has no spread to measure.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError(f"expected a (batch, p) array, got shape {z.shape}")
    if z.shape[0] < 2:
        raise InsufficientBatchError(
            f"need at least 2 samples for batch statistics, got {z.shape[0]}"
        )
    mean = z.mean(axis=0)
    var = z.var(axis=0)  # ddof=0: population variance
    return mean, var


def kl_diag(mean, var, target_mean, sigma: float) -> float:
    """KL( N(mean, diag(var)) || N(target_mean, sigma^2 I) ), closed form.

    ``mean``/``var``/``target_mean`` are length-p vectors (scalars fine for
    p = 1). Variances are floored at ``VARIANCE_FLOOR`` inside the log.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    var = np.atleast_1d(np.asarray(var, dtype=np.float64))
    target_mean = np.atleast_1d(np.asarray(target_mean, dtype=np.float64))
    if mean.shape != var.shape or mean.shape != target_mean.shape:
        raise ShapeError(
            f"mean {mean.shape}, var {var.shape}, target {target_mean.shape} "
            "must agree"
        )
    if np.any(var < 0.0):
        raise NumericError("negative variance")
    if not sigma > 0.0:
        raise NumericError(f"sigma must be positive, got {sigma}")
    p = mean.size
    s2 = float(sigma) ** 2
    floored = np.maximum(var, VARIANCE_FLOOR)
    return 0.5 * float(
        p * np.log(s2)
        - np.log(floored).sum()
        - p
        + var.sum() / s2
        + ((mean - target_mean) ** 2).sum() / s2
    )


def kl_full(mean, cov, target_mean, target_cov) -> float:
    """KL( N(mean, cov) || N(target_mean, target_cov) ) for full covariances.

    Reference route only; training always uses the diagonal form. Uses
    Cholesky factors for the log-determinants and solves.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    target_mean = np.atleast_1d(np.asarray(target_mean, dtype=np.float64))
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    target_cov = np.atleast_2d(np.asarray(target_cov, dtype=np.float64))
    p = mean.size
    if cov.shape != (p, p) or target_cov.shape != (p, p):
        raise ShapeError(
            f"covariances must be ({p}, {p}), got {cov.shape} and {target_cov.shape}"
        )
    try:
        ls = np.linalg.cholesky(cov)
        lt = np.linalg.cholesky(target_cov)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"covariance is not positive definite: {exc}") from exc
    logdet_s = 2.0 * np.log(np.diag(ls)).sum()
    logdet_t = 2.0 * np.log(np.diag(lt)).sum()
    tinv_cov = np.linalg.solve(target_cov, cov)
    diff = mean - target_mean
    maha = diff @ np.linalg.solve(target_cov, diff)
    return 0.5 * float(logdet_t - logdet_s - p + np.trace(tinv_cov) + maha)


def kl_loss_node(tape: Tape, z: Node, target_mean: np.ndarray, sigma: float) -> Node:
    """Record the diagonal KL of a batch node onto one target, on the tape.

    ``z`` is a (b, p) node with b >= 2; ``target_mean`` a length-p vector.
    Returns a 1x1 node.
    """
    if z.value.shape[0] < 2:
        raise InsufficientBatchError(
            f"need at least 2 samples for batch statistics, got {z.value.shape[0]}"
        )
    p = z.value.shape[1]
    target = np.asarray(target_mean, dtype=np.float64).reshape(1, -1)
    if target.shape[1] != p:
        raise ShapeError(
            f"target mean has {target.shape[1]} dimensions, outputs have {p}"
        )
    s2 = float(sigma) ** 2
    if not s2 > 0.0:
        raise NumericError(f"sigma must be positive, got {sigma}")

    mean = tape.reduce_mean(z)
    var = tape.reduce_var(z)
    sum_log = tape.reduce_sum(tape.log(tape.clamp_min(var, VARIANCE_FLOOR)))
    sum_var = tape.reduce_sum(var)
    diff = tape.sub(mean, tape.constant(target))
    sum_sq = tape.reduce_sum(tape.square(diff))

    inner = tape.add(
        tape.scale(sum_log, -1.0),
        tape.scale(tape.add(sum_var, sum_sq), 1.0 / s2),
    )
    return tape.scale(tape.add_scalar(inner, p * np.log(s2) - p), 0.5)


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss values for one step, for logging."""

    loss_m: float
    loss_n: float

    @property
    def total(self) -> float:
        return self.loss_m + self.loss_n


def total_loss(
    tape: Tape, z_match: Node, z_nonmatch: Node, targets: TargetSpec
) -> tuple[Node, LossBreakdown]:
    """L = KL(matching batch || N_m) + KL(non-matching batch || N_n).

    Returns the 1x1 loss node plus the detached per-side values.
    """
    loss_m = kl_loss_node(tape, z_match, targets.mean_m, targets.sigma_m)
    loss_n = kl_loss_node(tape, z_nonmatch, targets.mean_n, targets.sigma_n)
    node = tape.add(loss_m, loss_n)
    breakdown = LossBreakdown(
        loss_m=float(loss_m.value[0, 0]), loss_n=float(loss_n.value[0, 0])
    )
    return node, breakdown
