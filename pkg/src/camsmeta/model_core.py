"""Data model and within-trial contrast algebra.

Every trial contributes estimates for two subgroups, A and B, on a log effect
scale (log-RR, log-OR, log-HR). The information fraction (IF) of subgroup B,

    pi = sigma_A^2 / (sigma_A^2 + sigma_B^2),

is the share of the trial's statistical information carried by subgroup B. The
pair (y_A, y_B) maps linearly to the contrast g = y_B - y_A and the
prevalence-weighted mean m = (1 - pi) y_A + pi y_B; when pi is the IF, g and m
are uncorrelated within the trial, which is the identity that the rest of the
package exploits.

All effects stay on the log scale here; exponentiation is an output-formatting
concern.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DomainError, ValidationWarning

DEFAULT_SENTINEL_SE = 100.0

# Reported info fractions are validated against the recomputed value at this
# tolerance; the recomputed value always wins.
IFRAC_MATCH_TOL = 1e-6


# ----------------------------------------------------------------------
# domain types
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class SubgroupObservation:
    """One subgroup's estimate within a trial.

    A subgroup recorded as missing is represented by estimate 0 and a sentinel
    standard error (default 100), which carries essentially no weight.
    """

    subgroup_label: str
    estimate: float
    std_error: float
    count: int | None = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.estimate):
            raise DomainError(f"estimate must be finite, got {self.estimate}")
        if not (self.std_error > 0) or not math.isfinite(self.std_error):
            raise DomainError(f"std_error must be positive, got {self.std_error}")
        if self.count is not None and self.count < 0:
            raise DomainError(f"count must be nonnegative, got {self.count}")


def missing_observation(subgroup_label: str,
                        sentinel_se: float = DEFAULT_SENTINEL_SE) -> SubgroupObservation:
    """Sentinel observation for a subgroup absent from a trial."""
    return SubgroupObservation(subgroup_label, 0.0, sentinel_se)


@dataclass(frozen=True)
class StudyRecord:
    """A two-subgroup trial with its derived information fraction."""

    study_id: str
    obs_a: SubgroupObservation
    obs_b: SubgroupObservation
    info_fraction: float
    prevalence_proxy: float | None = None

    def __post_init__(self) -> None:
        recomputed = compute_if(self.obs_a.std_error, self.obs_b.std_error)
        if abs(self.info_fraction - recomputed) > 1e-12:
            raise ContractError(
                f"study {self.study_id}: info_fraction {self.info_fraction!r} "
                f"is not the value {recomputed!r} implied by the standard errors")

    @classmethod
    def from_observations(cls, study_id: str,
                          obs_a: SubgroupObservation,
                          obs_b: SubgroupObservation,
                          reported_ifrac: float | None = None) -> "StudyRecord":
        """Build a record, always recomputing the IF from standard errors.

        A reported info fraction, when given, is only validated (tolerance
        1e-6, warning on mismatch), never adopted: the recomputed IF is what
        carries the orthogonality guarantee.
        """
        pi = compute_if(obs_a.std_error, obs_b.std_error)
        if reported_ifrac is not None and abs(reported_ifrac - pi) > IFRAC_MATCH_TOL:
            warnings.warn(
                f"study {study_id}: reported ifrac {reported_ifrac} differs from "
                f"the value {pi} recomputed from standard errors; using the "
                f"recomputed value",
                ValidationWarning, stacklevel=2)
        proxy = None
        if obs_a.count is not None and obs_b.count is not None:
            if obs_a.count + obs_b.count > 0:
                proxy = prevalence_from_counts(obs_a.count, obs_b.count)
        return cls(study_id, obs_a, obs_b, pi, proxy)


@dataclass(frozen=True)
class MultiStudyRecord:
    """A K-subgroup trial: estimate vector, diagonal covariance, prevalences."""

    study_id: str
    estimates: np.ndarray
    cov_diag: np.ndarray
    prevalence: np.ndarray

    def __post_init__(self) -> None:
        est = np.asarray(self.estimates, dtype=float)
        var = np.asarray(self.cov_diag, dtype=float)
        pi = np.asarray(self.prevalence, dtype=float)
        object.__setattr__(self, "estimates", est)
        object.__setattr__(self, "cov_diag", var)
        object.__setattr__(self, "prevalence", pi)
        k = est.shape[0]
        if k < 2:
            raise DomainError(f"study {self.study_id}: need K >= 2 subgroups, got {k}")
        if var.shape != (k,) or pi.shape != (k,):
            raise ContractError(
                f"study {self.study_id}: estimates, cov_diag and prevalence "
                f"must share length, got {est.shape}, {var.shape}, {pi.shape}")
        if not np.all(var > 0):
            raise DomainError(f"study {self.study_id}: all variances must be positive")
        if np.any(pi < 0):
            raise DomainError(f"study {self.study_id}: prevalences must be nonnegative")
        if abs(pi.sum() - 1.0) > 1e-12:
            raise DomainError(
                f"study {self.study_id}: prevalences must sum to 1, got {pi.sum()!r}")

    @property
    def k(self) -> int:
        return self.estimates.shape[0]


@dataclass(frozen=True)
class MetaDataset:
    """An ordered collection of studies sharing one effect scale."""

    studies: tuple
    scale_label: str = "log-RR"
    uisd_assumption: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "studies", tuple(self.studies))
        if len(self.studies) == 0:
            raise ContractError("dataset must contain at least one study")
        ids = [s.study_id for s in self.studies]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ContractError(f"duplicate study ids: {dupes}")
        kinds = {type(s).__name__ for s in self.studies}
        if len(kinds) > 1:
            raise ContractError(f"mixed study record kinds in one dataset: {sorted(kinds)}")

    @property
    def is_multi(self) -> bool:
        return isinstance(self.studies[0], MultiStudyRecord)

    @property
    def info_fractions(self) -> np.ndarray:
        if self.is_multi:
            raise ContractError("info_fractions applies to two-subgroup datasets only")
        return np.array([s.info_fraction for s in self.studies])


@dataclass(frozen=True)
class CovarianceStructure:
    """Between-study heterogeneity SDs for overall effect and interaction."""

    tau: float = 0.0
    tau_gamma: float = 0.0

    def __post_init__(self) -> None:
        if self.tau < 0 or self.tau_gamma < 0:
            raise DomainError(
                f"heterogeneities must be nonnegative, got tau={self.tau}, "
                f"tau_gamma={self.tau_gamma}")


# ----------------------------------------------------------------------
# information-fraction arithmetic
# ----------------------------------------------------------------------

def compute_if(sigma_a: float, sigma_b: float) -> float:
    """Information fraction of subgroup B from the two standard errors.

    Parameters
    ----------
    sigma_a, sigma_b : float
        Positive standard errors of the subgroup A and B estimates.

    Returns
    -------
    float
        sigma_a**2 / (sigma_a**2 + sigma_b**2), algebraically equal to the
        precision form sigma_b**-2 / (sigma_a**-2 + sigma_b**-2).
    """
    if not (sigma_a > 0) or not (sigma_b > 0):
        raise DomainError(
            f"standard errors must be positive, got ({sigma_a}, {sigma_b})")
    va = sigma_a * sigma_a
    vb = sigma_b * sigma_b
    return va / (va + vb)


def prevalence_from_counts(n_a: int, n_b: int) -> float:
    """Subgroup B prevalence n_b / (n_a + n_b) from subject counts."""
    if n_a < 0 or n_b < 0:
        raise DomainError(f"counts must be nonnegative, got ({n_a}, {n_b})")
    total = n_a + n_b
    if total == 0:
        raise DomainError("cannot form a prevalence from two zero counts")
    return n_b / total


# ----------------------------------------------------------------------
# contrast / mean decomposition
# ----------------------------------------------------------------------

def decompose(study: StudyRecord, pi: float) -> tuple[float, float]:
    """Map a study's subgroup estimates to (contrast, weighted mean).

    Parameters
    ----------
    study : StudyRecord
    pi : float in [0, 1]
        Weight of subgroup B in the mean; pass ``study.info_fraction`` for the
        orthogonal decomposition.

    Returns
    -------
    (g, m) : tuple of float
        g = y_B - y_A and m = (1 - pi) y_A + pi y_B. The map is linear and
        invertible for every pi (its determinant is -1), see :func:`compose`.
    """
    _check_unit_interval(pi, "pi")
    y_a = study.obs_a.estimate
    y_b = study.obs_b.estimate
    return y_b - y_a, (1.0 - pi) * y_a + pi * y_b


def compose(g: float, m: float, pi: float) -> tuple[float, float]:
    """Inverse of :func:`decompose`: recover (y_A, y_B) from (g, m)."""
    _check_unit_interval(pi, "pi")
    y_a = m - pi * g
    return y_a, y_a + g


def cov_gm(pi: float, var_a: float, var_b: float) -> float:
    """Within-trial covariance of the contrast g and the weighted mean m.

    For a diagonal sampling covariance diag(var_a, var_b),

        Cov(g, m) = pi * var_b - (1 - pi) * var_a,

    which is affine in pi and vanishes exactly at the information fraction
    pi = var_a / (var_a + var_b). At pi = 0.5 this is (var_b - var_a) / 2.
    """
    _check_unit_interval(pi, "pi")
    if not (var_a > 0) or not (var_b > 0):
        raise DomainError(f"variances must be positive, got ({var_a}, {var_b})")
    return pi * var_b - (1.0 - pi) * var_a


def marginal_covariance(study: StudyRecord, het: CovarianceStructure,
                        pi: float) -> np.ndarray:
    """Marginal 2x2 covariance of (y_A, y_B) under the hierarchical model.

    The shared trial effect contributes tau^2 on every entry; the interaction
    random effect loads on (x - pi) with x in {0, 1}, contributing

        [[pi^2, -pi (1 - pi)], [-pi (1 - pi), (1 - pi)^2]] * tau_gamma^2

    on top of the sampling covariance diag(sigma_A^2, sigma_B^2). At pi = 0.5
    with tau = 0 this reduces to the familiar +/- tau_gamma^2 / 4 pattern.
    """
    va = study.obs_a.std_error ** 2
    vb = study.obs_b.std_error ** 2
    t2 = het.tau ** 2
    tg2 = het.tau_gamma ** 2
    off = t2 - pi * (1.0 - pi) * tg2
    return np.array([
        [va + t2 + pi * pi * tg2, off],
        [off, vb + t2 + (1.0 - pi) * (1.0 - pi) * tg2],
    ])


def _check_unit_interval(x: float, name: str) -> None:
    if not (0.0 <= x <= 1.0):
        raise DomainError(f"{name} must lie in [0, 1], got {x}")
