"""Finite Gaussian mixtures in one dimension, plus discrete-grid quantiles.

The grid posterior of every fit is a weighted mixture of normal conditionals,
so posterior summaries reduce to CDF evaluation and inversion of mixtures.
Components with zero standard deviation are allowed and treated as atoms,
which keeps degenerate fits (fixed heterogeneity, point-mass conditionals)
inside the same code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import ContractError, DomainError

# Absolute tolerance for quantile bisection.
QUANTILE_TOL = 1e-8


@dataclass(frozen=True)
class GaussianMixture1D:
    """Mixture sum_i w_i Normal(mean_i, sd_i^2) with w >= 0 summing to 1."""

    weights: np.ndarray
    means: np.ndarray
    sds: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float).ravel()
        mu = np.asarray(self.means, dtype=float).ravel()
        sd = np.asarray(self.sds, dtype=float).ravel()
        if not (w.shape == mu.shape == sd.shape) or w.size == 0:
            raise ContractError(
                f"weights, means, sds must be equal-length nonempty vectors, "
                f"got {w.shape}, {mu.shape}, {sd.shape}")
        if np.any(w < 0) or np.any(sd < 0):
            raise DomainError("weights and sds must be nonnegative")
        total = w.sum()
        if not np.isfinite(total) or abs(total - 1.0) > 1e-8:
            raise ContractError(f"weights must sum to 1, got {total!r}")
        object.__setattr__(self, "weights", w / total)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "sds", sd)

    # ------------------------------------------------------------------
    # distribution functions
    # ------------------------------------------------------------------

    def cdf(self, x):
        """P(X <= x), vectorized over x."""
        xa = np.asarray(x, dtype=float)
        flat = xa.reshape(-1, 1)
        smooth = self.sds > 0
        out = np.zeros(flat.shape[0])
        if smooth.any():
            z = (flat - self.means[smooth]) / self.sds[smooth]
            out += ndtr(z) @ self.weights[smooth]
        if (~smooth).any():
            out += (flat >= self.means[~smooth]) @ self.weights[~smooth]
        return out.reshape(xa.shape) if xa.shape else float(out[0])

    def tail_prob(self, threshold: float) -> float:
        """P(X > threshold), computed from the upper tail for accuracy."""
        smooth = self.sds > 0
        p = 0.0
        if smooth.any():
            z = (self.means[smooth] - threshold) / self.sds[smooth]
            p += float(self.weights[smooth] @ ndtr(z))
        if (~smooth).any():
            p += float(self.weights[~smooth] @ (self.means[~smooth] > threshold))
        return min(max(p, 0.0), 1.0)

    def mean(self) -> float:
        return float(self.weights @ self.means)

    def var(self) -> float:
        second = self.weights @ (self.sds ** 2 + self.means ** 2)
        return float(second - self.mean() ** 2)

    # ------------------------------------------------------------------
    # quantiles
    # ------------------------------------------------------------------

    def quantile(self, q: float) -> float:
        """Inverse CDF by bracketed bisection to absolute tolerance 1e-8."""
        if not (0.0 < q < 1.0):
            raise DomainError(f"quantile level must lie in (0, 1), got {q}")
        spread = float(self.sds.max(initial=0.0))
        lo = float(self.means.min()) - max(10.0 * spread, 1e-6)
        hi = float(self.means.max()) + max(10.0 * spread, 1e-6)
        # widen until the bracket surely contains the quantile
        while self.cdf(lo) > q:
            lo -= (hi - lo)
        while self.cdf(hi) < q:
            hi += (hi - lo)
        while hi - lo > QUANTILE_TOL:
            mid = 0.5 * (lo + hi)
            if self.cdf(mid) < q:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def median(self) -> float:
        return self.quantile(0.5)

    def interval(self, level: float = 0.95) -> tuple[float, float]:
        """Equal-tailed credible interval."""
        if not (0.0 < level < 1.0):
            raise DomainError(f"interval level must lie in (0, 1), got {level}")
        half = 0.5 * (1.0 - level)
        return self.quantile(half), self.quantile(1.0 - half)


# ----------------------------------------------------------------------
# quantiles of a discrete grid marginal
# ----------------------------------------------------------------------
# Scale parameters live on a fixed grid; their marginal posterior is a set of
# node weights. The first node's weight stays an atom (the grid starts at 0
# and genuine boundary mass belongs there); between later nodes the CDF is
# interpolated linearly.

def grid_quantile(nodes: np.ndarray, weights: np.ndarray, q: float) -> float:
    nodes = np.asarray(nodes, dtype=float)
    w = np.asarray(weights, dtype=float)
    if nodes.shape != w.shape or nodes.ndim != 1:
        raise ContractError("nodes and weights must be equal-length vectors")
    if not (0.0 < q < 1.0):
        raise DomainError(f"quantile level must lie in (0, 1), got {q}")
    cum = np.cumsum(w / w.sum())
    if q <= cum[0] or nodes.size == 1:
        return float(nodes[0])
    idx = int(np.searchsorted(cum, q))
    if idx >= nodes.size:
        return float(nodes[-1])
    c0, c1 = cum[idx - 1], cum[idx]
    if c1 <= c0:
        return float(nodes[idx])
    frac = (q - c0) / (c1 - c0)
    return float(nodes[idx - 1] + frac * (nodes[idx] - nodes[idx - 1]))


def grid_interval(nodes, weights, level: float = 0.95) -> tuple[float, float]:
    half = 0.5 * (1.0 - level)
    return (grid_quantile(nodes, weights, half),
            grid_quantile(nodes, weights, 1.0 - half))


def grid_tail_prob(nodes, weights, threshold: float) -> float:
    """P(X > threshold) = 1 - F(threshold) for the CDF grid_quantile inverts."""
    nodes = np.asarray(nodes, dtype=float)
    w = np.asarray(weights, dtype=float)
    cum = np.cumsum(w / w.sum())
    if threshold < nodes[0]:
        return 1.0
    if threshold >= nodes[-1]:
        return 0.0
    idx = int(np.searchsorted(nodes, threshold, side="right"))
    c0 = cum[idx - 1]
    span = nodes[idx] - nodes[idx - 1]
    frac = (threshold - nodes[idx - 1]) / span if span > 0 else 1.0
    f = c0 + frac * (cum[idx] - c0)
    return min(max(1.0 - f, 0.0), 1.0)
