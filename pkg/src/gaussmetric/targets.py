"""Target distributions for the metric space and the induced decision rule.

Matching and non-matching pairs are pulled toward isotropic Gaussians
N(mu_m, sigma_m^2 I) and N(mu_n, sigma_n^2 I) in R^p. Unequal sigmas are
representable here; the default trainer configuration rejects them, since
the linear decision rule below is the likelihood-ratio test only for equal
covariances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class TargetSpec:
    """Pair of isotropic Gaussian targets in R^p.

    ``mu_m``/``mu_n`` are scalar coordinates replicated across all p
    dimensions, matching the isotropic setup.
    """

    mu_m: float = 0.0
    mu_n: float = 40.0
    sigma_m: float = 1.0
    sigma_n: float = 1.0
    p: int = 1

    def __post_init__(self):
        if self.p < 1:
            raise ConfigError(f"p must be >= 1, got {self.p}")
        for name in ("sigma_m", "sigma_n"):
            value = getattr(self, name)
            if not (value > 0.0) or not np.isfinite(value):
                raise ConfigError(f"{name} must be finite and positive, got {value}")
        if not np.isfinite(self.mu_m) or not np.isfinite(self.mu_n):
            raise ConfigError("target means must be finite")
        if self.mu_m == self.mu_n:
            raise ConfigError("matching and non-matching targets must differ")

    @property
    def mean_m(self) -> np.ndarray:
        """Matching mean as a (1, p) row."""
        return np.full((1, self.p), float(self.mu_m))

    @property
    def mean_n(self) -> np.ndarray:
        """Non-matching mean as a (1, p) row."""
        return np.full((1, self.p), float(self.mu_n))

    @property
    def equal_sigma(self) -> bool:
        return self.sigma_m == self.sigma_n

    @property
    def midpoint(self) -> float:
        """Scalar decision threshold for the p = 1 view."""
        return 0.5 * (float(self.mu_m) + float(self.mu_n))


@dataclass(frozen=True)
class DecisionRule:
    """Linear classifier induced by a :class:`TargetSpec`.

    A metric output z in R^p is labeled matching iff

        w . z > w . (mu_m + mu_n) / 2,   w = mu_m - mu_n,

    with ties going to non-matching. For p = 1 this is simply
    ``z < midpoint`` when mu_m < mu_n (and the mirror image otherwise).
    Optimal for equal isotropic covariances, where it coincides with
    nearest-target-mean classification.
    """

    targets: TargetSpec
    w: np.ndarray = field(init=False, repr=False)
    threshold: float = field(init=False)

    def __post_init__(self):
        w = (self.targets.mean_m - self.targets.mean_n).reshape(-1)
        mid = 0.5 * (self.targets.mean_m + self.targets.mean_n).reshape(-1)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "threshold", float(w @ mid))

    def margin(self, z) -> np.ndarray:
        """Signed score w.z - threshold for each row of ``z``.

        Positive means matching; zero is a tie and resolves non-matching.
        """
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 1:
            z = z.reshape(1, -1)
        if z.shape[1] != self.targets.p:
            raise ConfigError(
                f"expected {self.targets.p}-dimensional outputs, got {z.shape[1]}"
            )
        return z @ self.w - self.threshold

    def decide(self, z) -> np.ndarray:
        """Boolean matching labels for each row of ``z``."""
        return self.margin(z) > 0.0
