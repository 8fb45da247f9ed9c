"""Drift-mismatch functionals bounding the path-space KL divergence.

The interacting and mean-field-driven systems differ only through the
per-particle drift mismatch

    b_i(t, x) = (1/(N-1)) sum_{j != i} K(x_i - x_j) - (K * rho_t)(x_i),

and its noise-space weighting bb_i = sigma^T Lambda^{-1} (-b_i).  The change
of measure between the two path laws has log density

    log(dQ2/dQ1) = sum_n sum_i [ bb_i(t_n) . dW_{i,n} - 1/2 |bb_i(t_n)|^2 dt ]

with left-endpoint Ito sums, which is an exact discrete martingale (mean of
its exponential is 1).  Averaging the quadratic term yields two Monte Carlo
upper bounds for the divergence between the N-particle path law and the
tensorized mean-field law:

    sharper      : 1/2 sum_i integral E |bb_i|^2 dt
    lambda-relax : 1/(2 lambda) sum_i integral E |b_i|^2 dt

evaluated along interacting paths (forward direction) or along i.i.d.
mean-field-driven paths (reversed direction).  ``theory_constants`` and
``theory_bound_curve`` provide the explicit Gronwall envelope
C(eta) eta (exp(T / (2 lambda eta)) - 1) that must dominate the forward
functional for bounded kernels.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .engine import EnsembleStats, PathBundle, ReferenceCloud, run_ensemble
from .errors import ConfigError, GridMismatch, TooFewParticles
from .model import InitialLaw, Kernel, RngPolicy, SystemParams, TimeGrid

__all__ = [
    "DriftMismatch",
    "FunctionalEstimate",
    "KLBoundResult",
    "TheoryConstants",
    "drift_mismatch",
    "log_rn_derivative",
    "forward_kl_bound",
    "reversed_kl_functional",
    "rn_martingale",
    "theory_constants",
    "theory_bound_curve",
    "reversed_explicit_bound",
]

_ROOT8E = 4.0 * math.sqrt(2.0) * math.e  # 4 sqrt(2) e, the concentration scale


# ---------------------------------------------------------------------------
# Mismatch processes on stored bundles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DriftMismatch:
    """Raw and weighted drift mismatches along one stored realization.

    ``raw`` has shape (n_steps+1, N, d): b_i(t_n, X(t_n)).
    ``weighted`` has shape (n_steps+1, N, d'): sigma^T Lambda^{-1} (-b_i).
    """

    grid: TimeGrid
    raw: np.ndarray
    weighted: np.ndarray

    def __post_init__(self):
        if self.raw.shape[0] != self.grid.n_steps + 1:
            raise GridMismatch("mismatch rows do not match grid")
        self.raw.setflags(write=False)
        self.weighted.setflags(write=False)


def drift_mismatch(bundle: PathBundle, cloud: ReferenceCloud, kernel: Kernel,
                   params: SystemParams) -> DriftMismatch:
    """Evaluate b_i and its weighted version at every (step, particle)."""
    if bundle.grid != cloud.grid:
        raise GridMismatch("bundle and cloud grids differ")
    if bundle.N < 2:
        raise TooFewParticles("drift mismatch needs N >= 2")
    params.require_nondegenerate()
    raw = kernel.pair_mean(bundle.X) - cloud.convolve_path(kernel, bundle.X)
    weighted = -(raw @ params.weight_matrix.T)
    return DriftMismatch(grid=bundle.grid, raw=raw, weighted=weighted)


def log_rn_derivative(mismatch: DriftMismatch, bundle: PathBundle,
                      params: SystemParams) -> float:
    """log(dQ2/dQ1) for one realization, by left-endpoint Ito sums."""
    if mismatch.grid != bundle.grid:
        raise GridMismatch("mismatch grid differs from bundle grid")
    dt = bundle.grid.dt
    bb = mismatch.weighted[:-1]
    stoch = float((bb * bundle.dW).sum())
    quad = float((bb * bb).sum()) * dt
    return stoch - 0.5 * quad


# ---------------------------------------------------------------------------
# Theory constants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TheoryConstants:
    """Explicit constants of the Gronwall bound for a bounded kernel."""

    k_sup: float
    lam: float
    eta: float
    eta_max: float
    c_eta: float
    c1: float
    c2: float
    c: float


def theory_constants(k_sup: float, lam: float,
                     eta: Optional[float] = None) -> TheoryConstants:
    """All Gronwall-bound constants for sup norm k_sup and noise floor lam.

    eta must lie in (0, 1/(4 sqrt(2) e k_sup^2)); the default is the midpoint
    choice 1/(8 sqrt(2) e k_sup^2), for which C(eta) = 8 k_sup^2 + 2 log 2.
    """
    if k_sup <= 0:
        raise ConfigError("theory constants need a positive kernel sup norm")
    if lam <= 0:
        raise ConfigError("theory constants need lambda > 0")
    k2 = k_sup * k_sup
    eta_max = 1.0 / (_ROOT8E * k2)
    if eta is None:
        eta = 0.5 * eta_max
    if not (0.0 < eta < eta_max):
        raise ConfigError(f"eta must lie in (0, {eta_max:.6g})")
    gap = 1.0 - _ROOT8E * k2 * eta
    if gap < 1e-6:
        c_eta = float("inf")
    else:
        c_eta = 8.0 * k2 + 2.0 * math.log(1.0 / gap)
    c1 = (4.0 * k2 + math.log(2.0)) / (_ROOT8E * k2)
    c2 = 4.0 * _ROOT8E * k2 / lam
    return TheoryConstants(
        k_sup=k_sup, lam=lam, eta=eta, eta_max=eta_max,
        c_eta=c_eta, c1=c1, c2=c2, c=max(c1, c2),
    )


def theory_bound_curve(consts: TheoryConstants, lam: float, T_values) -> np.ndarray:
    """Gronwall envelope C(eta) eta (e^{T/(2 lam eta)} - 1) at each horizon."""
    T_values = np.atleast_1d(np.asarray(T_values, dtype=np.float64))
    if (T_values < 0).any():
        raise ConfigError("horizons must be nonnegative")
    out = np.empty_like(T_values)
    for idx, T in enumerate(T_values):
        expo = T / (2.0 * lam * consts.eta)
        if expo > 700.0:
            out[idx] = float("inf")
        else:
            out[idx] = consts.c_eta * consts.eta * (math.exp(expo) - 1.0)
    return out


def reversed_explicit_bound(k_sup: float, lam: float, T: float, N: int) -> float:
    """Crude explicit envelope 4 |K|^2 T N / ((N-1) lam) for the reversed
    functional along i.i.d. mean-field paths."""
    return 4.0 * k_sup * k_sup * T * N / ((N - 1) * lam)


# ---------------------------------------------------------------------------
# Monte Carlo functionals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FunctionalEstimate:
    """A nonnegative time-integrated Monte Carlo estimate.

    ``per_time_series[n]`` is the realization average of the integrand at the
    left endpoint t_n (prefactor included), so value = dt * sum(series).
    """

    value: float
    std_error: float
    per_time_series: np.ndarray
    per_time_se: np.ndarray
    n_realizations: int
    dt: float
    config_hash: str = ""

    def cumulative(self) -> np.ndarray:
        """Running integral dt * cumsum(series), one entry per grid step."""
        return self.dt * np.cumsum(self.per_time_series)


@dataclass(frozen=True)
class KLBoundResult:
    """Both divergence functionals from one ensemble run.

    ``lambda_weighted`` is the relaxed version (1/(2 lambda)) sum E|b|^2;
    ``sharper`` keeps the full noise weighting 1/2 sum E|bb|^2.  Equal when
    sigma is a scalar multiple of an orthogonal matrix.  ``checkpoints`` maps
    a grid step to (value, std_error) pairs of partial integrals.
    """

    lambda_weighted: FunctionalEstimate
    sharper: FunctionalEstimate
    checkpoints: dict
    stats: EnsembleStats


def _estimate(totals, step_mean, step_se, scale, R, dt, config_hash):
    vals = scale * totals
    se = float(vals.std(ddof=1) / math.sqrt(R)) if R > 1 else 0.0
    return FunctionalEstimate(
        value=float(vals.mean()),
        std_error=se,
        per_time_series=scale * step_mean,
        per_time_se=scale * step_se,
        n_realizations=R,
        dt=dt,
        config_hash=config_hash,
    )


def _warn_if_unbounded(kernel: Kernel) -> None:
    if not kernel.bounded:
        warnings.warn(
            "unbounded kernel: the divergence functional is an oracle-only "
            "diagnostic here; no theory envelope exists for it"
        )


def _functional_from_stats(stats: EnsembleStats, lam: float, R: int,
                           config_hash: str) -> KLBoundResult:
    half_inv_lam = 0.5 / lam
    lam_est = _estimate(stats.raw_totals, stats.raw_step_mean, stats.raw_step_se,
                        half_inv_lam, R, stats.dt, config_hash)
    sharp_est = _estimate(stats.wt_totals, stats.wt_step_mean, stats.wt_step_se,
                          0.5, R, stats.dt, config_hash)
    checkpoints = {}
    if stats.checkpoints:
        for step, rec in stats.checkpoints.items():
            lam_vals = half_inv_lam * rec["raw"]
            sharp_vals = 0.5 * rec["wt"]
            checkpoints[step] = {
                "lambda_weighted": (
                    float(lam_vals.mean()),
                    float(lam_vals.std(ddof=1) / math.sqrt(R)) if R > 1 else 0.0,
                ),
                "sharper": (
                    float(sharp_vals.mean()),
                    float(sharp_vals.std(ddof=1) / math.sqrt(R)) if R > 1 else 0.0,
                ),
            }
    return KLBoundResult(lambda_weighted=lam_est, sharper=sharp_est,
                         checkpoints=checkpoints, stats=stats)


def forward_kl_bound(
    params: SystemParams,
    kernel: Kernel,
    init: InitialLaw,
    grid: TimeGrid,
    N: int,
    rng: RngPolicy,
    cloud: ReferenceCloud,
    R: int,
    *,
    order: str = "first",
    drift_b=None,
    checkpoint_steps: tuple = (),
    threads: int = 1,
    config_hash: str = "",
) -> KLBoundResult:
    """Monte Carlo divergence bound along interacting paths.

    Estimates (1/(2 lambda)) sum_i integral E|b_i|^2 ds and the sharper
    weighted variant over R realizations of the interacting system, using
    the frozen cloud for the mean-field convolution.
    """
    params.require_nondegenerate()
    _warn_if_unbounded(kernel)
    stats = run_ensemble(
        params, kernel, init, grid, N, rng, R,
        order=order, driver="interacting", cloud=cloud, drift_b=drift_b,
        accumulate_mismatch=True, checkpoint_steps=checkpoint_steps,
        threads=threads,
    )
    return _functional_from_stats(stats, params.lambda_min, R, config_hash)


def reversed_kl_functional(
    params: SystemParams,
    kernel: Kernel,
    init: InitialLaw,
    grid: TimeGrid,
    N: int,
    rng: RngPolicy,
    cloud: ReferenceCloud,
    R: int,
    *,
    order: str = "first",
    drift_b=None,
    checkpoint_steps: tuple = (),
    threads: int = 1,
    config_hash: str = "",
) -> KLBoundResult:
    """Same integrand evaluated along i.i.d. mean-field-driven paths."""
    params.require_nondegenerate()
    _warn_if_unbounded(kernel)
    stats = run_ensemble(
        params, kernel, init, grid, N, rng, R,
        order=order, driver="meanfield", cloud=cloud, drift_b=drift_b,
        accumulate_mismatch=True, checkpoint_steps=checkpoint_steps,
        threads=threads,
    )
    return _functional_from_stats(stats, params.lambda_min, R, config_hash)


def rn_martingale(
    params: SystemParams,
    kernel: Kernel,
    init: InitialLaw,
    grid: TimeGrid,
    N: int,
    rng: RngPolicy,
    cloud: ReferenceCloud,
    R: int,
    *,
    order: str = "first",
    threads: int = 1,
):
    """Sample mean and standard error of exp(log dQ2/dQ1) over R realizations.

    The discrete change of measure is an exact martingale, so the mean is 1
    up to Monte Carlo error regardless of dt.
    """
    params.require_nondegenerate()
    _warn_if_unbounded(kernel)
    stats = run_ensemble(
        params, kernel, init, grid, N, rng, R,
        order=order, driver="interacting", cloud=cloud,
        accumulate_mismatch=True, accumulate_log_rn=True, threads=threads,
    )
    weights = np.exp(stats.log_rn)
    mean = float(weights.mean())
    se = float(weights.std(ddof=1) / math.sqrt(R)) if R > 1 else 0.0
    return mean, se, stats
