"""Divergences and the inequality harnesses built on them.

Conventions: natural logarithms everywhere, 0 log 0 = 0, and off-support
mass returns an infinite marker value rather than raising, so fuzz suites
can keep going.  Empirical KL estimation is deliberately restricted to
low-dimensional marginals; high-dimensional and path-space divergences are
only ever accessed through the drift-mismatch bounds or the Gaussian oracle.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .engine import ReferenceCloud
from .errors import ConfigError, DimensionMismatch, SupportViolation
from .model import DOMAIN_RESAMPLE, Kernel, RngPolicy, kernel_sup_norm
from .oracle import ExchangeableGaussian, dense_gaussian_kl, exact_joint_kl, exact_marginal_kl

__all__ = [
    "DiscreteMeasure",
    "Channel",
    "GaussianMeasure",
    "ConcentrationReport",
    "f_divergence",
    "dpi_check",
    "gaussian_kl",
    "fenchel_young_check",
    "linear_scaling_check",
    "pinsker_tv",
    "knn_kl_estimate",
    "concentration_suite",
    "mz_inequality_check",
    "sine_product_differences",
]

_ROOT8E = 4.0 * math.sqrt(2.0) * math.e

DPI_TOL = 1e-10
NORMALIZATION_TOL = 1e-12


# ---------------------------------------------------------------------------
# Measures and channels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscreteMeasure:
    """Finite measure given as (label, probability) atoms."""

    labels: tuple
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if len(self.labels) != probs.size:
            raise DimensionMismatch("label count differs from probability count")
        if len(set(self.labels)) != len(self.labels):
            raise ConfigError("support labels must be unique")
        if (probs < 0).any():
            raise ConfigError("probabilities must be nonnegative")
        if abs(float(probs.sum()) - 1.0) > NORMALIZATION_TOL:
            raise ConfigError(f"probabilities sum to {probs.sum()!r}, not 1")
        probs.setflags(write=False)
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_atoms(cls, atoms: Sequence) -> "DiscreteMeasure":
        labels, probs = zip(*atoms)
        return cls(labels=tuple(labels), probs=np.array(probs, dtype=np.float64))


@dataclass(frozen=True)
class Channel:
    """Row-stochastic map from input atoms to output atoms."""

    matrix: np.ndarray

    def __post_init__(self):
        mat = np.atleast_2d(np.asarray(self.matrix, dtype=np.float64))
        if (mat < 0).any():
            raise ConfigError("channel entries must be nonnegative")
        if np.abs(mat.sum(axis=1) - 1.0).max() > NORMALIZATION_TOL:
            raise ConfigError("channel rows must sum to 1")
        mat.setflags(write=False)
        object.__setattr__(self, "matrix", mat)

    def push(self, measure: DiscreteMeasure) -> DiscreteMeasure:
        if len(measure.labels) != self.matrix.shape[0]:
            raise DimensionMismatch("measure size differs from channel input size")
        out = measure.probs @ self.matrix
        # renormalize the 1e-13-level float drift so the result revalidates
        out = out / out.sum()
        return DiscreteMeasure(labels=tuple(range(self.matrix.shape[1])), probs=out)


@dataclass(frozen=True)
class GaussianMeasure:
    """Gaussian with symmetric positive definite covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise DimensionMismatch("covariance shape must match the mean")
        if np.abs(cov - cov.T).max() > 1e-12 * max(1.0, np.abs(cov).max()):
            raise ConfigError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov)[0] <= 1e-12:
            raise ConfigError("covariance must be positive definite")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


# ---------------------------------------------------------------------------
# f-divergences and the data processing inequality
# ---------------------------------------------------------------------------


def _aligned(P: DiscreteMeasure, Q: DiscreteMeasure):
    if P.labels == Q.labels:
        return P.probs, Q.probs
    labels = list(Q.labels) + [l for l in P.labels if l not in set(Q.labels)]
    pmap = dict(zip(P.labels, P.probs))
    qmap = dict(zip(Q.labels, Q.probs))
    p = np.array([pmap.get(l, 0.0) for l in labels])
    q = np.array([qmap.get(l, 0.0) for l in labels])
    return p, q


def f_divergence(P: DiscreteMeasure, Q: DiscreteMeasure, f: str) -> float:
    """D_f(P || Q) for f in {'kl', 'tv', 'chi2'}.

    Off-support mass (P > 0 where Q = 0) gives +inf for kl and chi2; tv is
    always finite.
    """
    p, q = _aligned(P, Q)
    if f == "tv":
        return 0.5 * float(np.abs(p - q).sum())
    off_support = (p > 0) & (q == 0)
    if off_support.any():
        return math.inf
    if f == "kl":
        mask = p > 0
        return float((p[mask] * np.log(p[mask] / q[mask])).sum())
    if f == "chi2":
        mask = q > 0
        diff = p[mask] - q[mask]
        return float((diff * diff / q[mask]).sum())
    raise ConfigError(f"unknown divergence kind {f!r}")


def dpi_check(P: DiscreteMeasure, Q: DiscreteMeasure, ch: Channel, f: str):
    """Push P and Q through the channel; the divergence must not increase."""
    if P.labels != Q.labels:
        raise DimensionMismatch("P and Q must share an ordered support")
    d_in = f_divergence(P, Q, f)
    d_out = f_divergence(ch.push(P), ch.push(Q), f)
    holds = d_out <= d_in + DPI_TOL
    return d_in, d_out, holds


def gaussian_kl(P: GaussianMeasure, Q: GaussianMeasure) -> float:
    """Closed-form KL divergence between Gaussians."""
    if P.mean.size != Q.mean.size:
        raise DimensionMismatch("Gaussian dimensions differ")
    return dense_gaussian_kl(P.mean, P.cov, Q.mean, Q.cov)


def fenchel_young_check(rho: DiscreteMeasure, rho_tilde: DiscreteMeasure,
                        F: Callable, eta: float):
    """Change-of-measure inequality
    int F drho <= (1/eta) (KL(rho || rho_tilde) + log int e^{eta F} drho_tilde).
    """
    if eta <= 0:
        raise ConfigError("eta must be positive")
    p, q = _aligned(rho, rho_tilde)
    if ((p > 0) & (q == 0)).any():
        raise SupportViolation("rho puts mass outside supp(rho_tilde)")
    labels = list(rho_tilde.labels) + [
        l for l in rho.labels if l not in set(rho_tilde.labels)
    ]
    fvals = np.array([float(F(l)) for l in labels])
    lhs = float((fvals * p).sum())
    mask = p > 0
    kl = float((p[mask] * np.log(p[mask] / q[mask])).sum())
    log_mgf = float(np.log((np.exp(eta * fvals) * q).sum()))
    rhs = (kl + log_mgf) / eta
    return lhs, rhs, lhs <= rhs + DPI_TOL


def linear_scaling_check(joint: ExchangeableGaussian, sbar, k: int,
                         ref_mean=None):
    """(1/k) KL of the k-marginal against (1/n) KL of the joint."""
    per_k = exact_marginal_kl(joint, k, sbar, ref_mean=ref_mean) / k
    per_n = exact_joint_kl(joint, sbar, ref_mean=ref_mean) / joint.N
    return per_k, per_n, per_k <= per_n + DPI_TOL


def pinsker_tv(kl: float) -> float:
    """Total-variation upper bound sqrt(kl / 2)."""
    if kl < 0:
        raise ConfigError("KL divergence cannot be negative")
    return math.sqrt(kl / 2.0)


# ---------------------------------------------------------------------------
# Nearest-neighbor KL estimation
# ---------------------------------------------------------------------------


def knn_kl_estimate(samples_P, samples_Q, k: int = 1) -> float:
    """Nearest-neighbor estimate of KL(P || Q) from two sample sets.

    (d/n) sum_i log(nu_k(i) / rho_k(i)) + log(m/(n-1)), where rho_k is the
    k-NN radius of X_i within the other P samples and nu_k its k-NN radius
    to the Q samples.  A Q point at distance exactly zero is treated as the
    same datum and skipped; residual coincidences are jittered by 1e-12 with
    a warning.  Restricted to d <= 4: the estimator degrades quickly with
    dimension and these marginals are all the empirical route is trusted for.
    """
    P = np.atleast_2d(np.asarray(samples_P, dtype=np.float64))
    Q = np.atleast_2d(np.asarray(samples_Q, dtype=np.float64))
    if P.ndim != 2 or Q.ndim != 2 or P.shape[1] != Q.shape[1]:
        raise DimensionMismatch("sample arrays must be (count, d) with equal d")
    n, d = P.shape
    m = Q.shape[0]
    if d > 4:
        raise ConfigError("empirical KL estimation is limited to d <= 4")
    if n < 50 or m < 50:
        raise ConfigError("need at least 50 samples on each side")
    if k < 1 or k + 1 > n or k + 1 > m:
        raise ConfigError("neighbor count out of range")

    def radii(Pts, Qts):
        rho = cKDTree(Pts).query(Pts, k=k + 1)[0][:, k]
        dq = cKDTree(Qts).query(Pts, k=k + 1)[0]
        nu = np.where(dq[:, 0] == 0.0, dq[:, k], dq[:, k - 1])
        return rho, nu

    rho, nu = radii(P, Q)
    if (rho == 0).any() or (nu == 0).any():
        warnings.warn("duplicate points detected; jittering by 1e-12")
        jit = np.random.Generator(np.random.Philox(key=0x6A17))
        P = P + 1e-12 * jit.standard_normal(P.shape)
        Q = Q + 1e-12 * jit.standard_normal(Q.shape)
        rho, nu = radii(P, Q)
    return float((d / n) * np.log(nu / rho).sum() + math.log(m / (n - 1)))


# ---------------------------------------------------------------------------
# Exponential concentration of centered pair interactions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConcentrationReport:
    """Empirical exponential moment of the centered pair-product statistic.

    S = (eta/(N-1)) sum_{j1 != j2, both != i} A_{i,j1} . A_{i,j2} over N-tuples
    drawn i.i.d. from a cloud snapshot, with A_{i,j} = K(X_i - X_j) minus the
    snapshot convolution at X_i.  The admissible range and the bound
    1 / (1 - 4 sqrt(2) e |K|^2 eta) come with the statistic.
    """

    eta: float
    k_sup: float
    t: float
    N: int
    n_resamples: int
    empirical_moment: float
    std_error: float
    bound: float
    holds: bool
    statistics: np.ndarray


def concentration_suite(cloud: ReferenceCloud, kernel: Kernel, t: float,
                        N: int, eta: float, R: int, rng: RngPolicy,
                        ) -> ConcentrationReport:
    """Resample N-tuples from the snapshot at time t and test the bound."""
    if N < 2:
        raise ConfigError("the statistic needs N >= 2")
    if R < 1:
        raise ConfigError("need at least one resample")
    ksup = kernel_sup_norm(kernel, cloud.d)
    scale = _ROOT8E * ksup * ksup
    if eta <= 0 or (scale > 0 and eta >= 1.0 / scale):
        raise ConfigError("eta outside the admissible range")
    bound = 1.0 / (1.0 - scale * eta)

    step = cloud.grid.step_of(t)
    pts = cloud.positions(step)
    conv = cloud.convolve_at(kernel, step, pts)
    idx = rng.stream(DOMAIN_RESAMPLE, 0, 0).integers(0, cloud.M, size=(R, N))
    xi = pts[idx[:, 0]]
    A = kernel.evaluate(xi[:, None, :] - pts[idx[:, 1:]]) - conv[idx[:, 0]][:, None, :]
    tot = A.sum(axis=1)
    cross = (tot * tot).sum(axis=-1) - (A * A).sum(axis=(1, 2))
    stats = (eta / (N - 1)) * cross
    weights = np.exp(stats)
    moment = float(weights.mean())
    se = float(weights.std(ddof=1) / math.sqrt(R)) if R > 1 else 0.0
    return ConcentrationReport(
        eta=eta, k_sup=ksup, t=t, N=N, n_resamples=R,
        empirical_moment=moment, std_error=se, bound=bound,
        holds=moment <= bound + 3.0 * se, statistics=stats,
    )


# ---------------------------------------------------------------------------
# Martingale moment inequality
# ---------------------------------------------------------------------------


class MZResult(NamedTuple):
    lhs: float
    rhs: float
    holds: bool


def sine_product_differences(n_terms: int, R: int, rng: RngPolicy,
                             kappa: float = 1.0, omega: float = 1.0) -> np.ndarray:
    """Martingale-difference samples D_k = A_k sum_{j<k} A_j from i.i.d. draws.

    Points are standard Gaussians, so the centering term
    kappa e^{-omega^2/2} sin(omega x) is the exact convolution and each D_k
    is conditionally centered by construction.  Returns (R, n_terms).
    """
    if n_terms < 1:
        raise ConfigError("need at least one difference term")
    g = rng.stream(DOMAIN_RESAMPLE, 1, 0)
    pts = g.standard_normal((R, n_terms + 2))
    x0 = pts[:, :1]
    xj = pts[:, 1:]
    A = kappa * np.sin(omega * (x0 - xj)) - kappa * math.exp(-0.5 * omega * omega) * np.sin(omega * x0)
    cums = np.cumsum(A, axis=1)
    return A[:, 1:] * cums[:, :-1]


def mz_inequality_check(increments, p: int) -> MZResult:
    """Monte Carlo check of ||sum_k D_k||_p^2 <= (p-1) sum_k ||D_k||_p^2.

    ``increments`` holds martingale-difference samples, shape (R, n_terms).
    Only even p are accepted; standard errors of both sides (delta method)
    set the 3-sigma slack on the comparison.
    """
    if p < 2 or p % 2 != 0:
        raise ConfigError("p must be an even integer >= 2")
    D = np.atleast_2d(np.asarray(increments, dtype=np.float64))
    R = D.shape[0]
    tot_p = np.abs(D.sum(axis=1)) ** p
    m_lhs = float(tot_p.mean())
    lhs = m_lhs ** (2.0 / p)
    se_lhs = 0.0
    if R > 1 and m_lhs > 0:
        se_lhs = (2.0 / p) * m_lhs ** (2.0 / p - 1.0) * float(tot_p.std(ddof=1)) / math.sqrt(R)

    rhs = 0.0
    var_rhs = 0.0
    for k in range(D.shape[1]):
        dk_p = np.abs(D[:, k]) ** p
        m_k = float(dk_p.mean())
        rhs += m_k ** (2.0 / p)
        if R > 1 and m_k > 0:
            se_k = (2.0 / p) * m_k ** (2.0 / p - 1.0) * float(dk_p.std(ddof=1)) / math.sqrt(R)
            var_rhs += se_k * se_k
    rhs *= p - 1.0
    se_rhs = (p - 1.0) * math.sqrt(var_rhs)
    slack = 3.0 * math.hypot(se_lhs, se_rhs)
    return MZResult(lhs=lhs, rhs=rhs, holds=lhs <= rhs + slack)
