"""Domain types shared by every other module.

Interaction kernels, diffusion parameters, time grids, initial laws and the
counter-based random-stream policy.  Everything here is immutable after
construction and safe to share across concurrent workers; all operations are
pure functions of their arguments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    ConfigError,
    DegenerateDiffusion,
    DimensionMismatch,
    UnboundedKernel,
)

DEGENERACY_TOL = 1e-10

__all__ = [
    "Kernel",
    "ZeroKernel",
    "ConstantKernel",
    "SineKernel",
    "GaussBumpKernel",
    "LinearKernel",
    "kernel_eval",
    "kernel_sup_norm",
    "lambda_min_of",
    "SystemParams",
    "TimeGrid",
    "InitialLaw",
    "GaussianIID",
    "DeterministicPoint",
    "EmpiricalInit",
    "RngPolicy",
    "DOMAIN_PATHS",
    "DOMAIN_CLOUD",
    "DOMAIN_RESAMPLE",
    "DOMAIN_AUX",
]


# ---------------------------------------------------------------------------
# Interaction kernels
# ---------------------------------------------------------------------------


class Kernel:
    """Interaction force K: R^d -> R^d.

    Subclasses provide ``evaluate`` plus two batched helpers the simulation
    engine relies on:

    ``pair_mean(X)``
        (1/(N-1)) sum_{j != i} K(X_i - X_j) for states shaped (..., N, d).

    ``convolution_state(points)`` / ``convolve(state, x)``
        The empirical convolution (1/M) sum_m K(x - Y_m) against a frozen
        point cloud, split so per-snapshot summaries can be cached.  For
        separable kernels the summary is a handful of moments and the
        convolution is exact in closed form; the generic fallback keeps the
        points and sums directly.
    """

    bounded: bool = True

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sup_norm(self, d: int) -> float:
        raise NotImplementedError

    # -- batched helpers -----------------------------------------------------

    def pair_mean(self, X: np.ndarray) -> np.ndarray:
        """Generic O(N^2) pairwise interaction mean."""
        N = X.shape[-2]
        if N < 2:
            raise DimensionMismatch("pair_mean needs at least 2 particles")
        diffs = X[..., :, None, :] - X[..., None, :, :]
        vals = self.evaluate(diffs)
        total = vals.sum(axis=-2)
        self_term = self.evaluate(np.zeros(X.shape[-1]))
        return (total - self_term) / (N - 1)

    def convolution_state(self, points: np.ndarray):
        return np.asarray(points, dtype=np.float64)

    def convolve(self, state, x: np.ndarray) -> np.ndarray:
        points = state
        out = np.zeros_like(x, dtype=np.float64)
        chunk = max(1, int(4e6 // max(x.size, 1)))
        for lo in range(0, points.shape[0], chunk):
            block = points[lo : lo + chunk]
            out += self.evaluate(x[..., None, :] - block).sum(axis=-2)
        return out / points.shape[0]

    def cloud_mean(self, x: np.ndarray, points: np.ndarray) -> np.ndarray:
        """(1/M) sum_m K(x - Y_m) against an (M, d) cloud snapshot."""
        return self.convolve(self.convolution_state(points), x)


@dataclass(frozen=True)
class ZeroKernel(Kernel):
    """K(x) = 0."""

    bounded = True

    def evaluate(self, x):
        return np.zeros_like(np.asarray(x, dtype=np.float64))

    def sup_norm(self, d):
        return 0.0

    def pair_mean(self, X):
        return np.zeros_like(X)

    def convolution_state(self, points):
        return None

    def convolve(self, state, x):
        return np.zeros_like(x)


@dataclass(frozen=True)
class ConstantKernel(Kernel):
    """K(x) = c for a fixed vector c of length d."""

    c: tuple

    bounded = True

    def __init__(self, c):
        arr = np.atleast_1d(np.asarray(c, dtype=np.float64))
        if arr.ndim != 1:
            raise ConfigError("constant kernel takes a 1-d vector")
        object.__setattr__(self, "c", tuple(arr.tolist()))

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.c, dtype=np.float64)

    def evaluate(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != len(self.c):
            raise DimensionMismatch(
                f"kernel dimension {len(self.c)}, input dimension {x.shape[-1]}"
            )
        return np.broadcast_to(self.vector, x.shape).copy()

    def sup_norm(self, d):
        return float(np.linalg.norm(self.vector))

    def pair_mean(self, X):
        # every pair contributes exactly c, so the mean is exactly c
        return self.evaluate(X)

    def convolution_state(self, points):
        return None

    def convolve(self, state, x):
        return self.evaluate(x)


@dataclass(frozen=True)
class SineKernel(Kernel):
    """K(x) = kappa * (sin(omega x_1), ..., sin(omega x_d))."""

    kappa: float = 1.0
    omega: float = 1.0

    bounded = True

    def __post_init__(self):
        if self.kappa < 0:
            raise ConfigError("sine kernel amplitude must be nonnegative")
        if self.omega <= 0:
            raise ConfigError("sine kernel frequency must be positive")

    def evaluate(self, x):
        return self.kappa * np.sin(self.omega * np.asarray(x, dtype=np.float64))

    def sup_norm(self, d):
        return self.kappa * float(np.sqrt(d))

    def pair_mean(self, X):
        # sin(w(a-b)) = sin(wa)cos(wb) - cos(wa)sin(wb); the i=j term vanishes,
        # so sums may run over all j.  Exact algebraic rewrite, O(N) not O(N^2).
        N = X.shape[-2]
        wX = self.omega * X
        s, c = np.sin(wX), np.cos(wX)
        cs = c.sum(axis=-2, keepdims=True)
        ss = s.sum(axis=-2, keepdims=True)
        return self.kappa * (s * cs - c * ss) / (N - 1)

    def convolution_state(self, points):
        wp = self.omega * np.asarray(points, dtype=np.float64)
        return (np.cos(wp).mean(axis=0), np.sin(wp).mean(axis=0))

    def convolve(self, state, x):
        mcos, msin = state
        wx = self.omega * np.asarray(x, dtype=np.float64)
        return self.kappa * (np.sin(wx) * mcos - np.cos(wx) * msin)


@dataclass(frozen=True)
class GaussBumpKernel(Kernel):
    """K(x) = kappa * x * exp(-|x|^2)."""

    kappa: float = 1.0

    bounded = True

    def __post_init__(self):
        if self.kappa < 0:
            raise ConfigError("bump kernel amplitude must be nonnegative")

    def evaluate(self, x):
        x = np.asarray(x, dtype=np.float64)
        r2 = (x * x).sum(axis=-1, keepdims=True)
        return self.kappa * x * np.exp(-r2)

    def sup_norm(self, d):
        # |K| = kappa * r * exp(-r^2) is maximal at r = 1/sqrt(2)
        return self.kappa / float(np.sqrt(2.0 * np.e))


@dataclass(frozen=True)
class LinearKernel(Kernel):
    """K(x) = -a x.  Unbounded; accepted only as an exact-oracle device."""

    a: float

    bounded = False

    def __post_init__(self):
        if self.a <= 0:
            raise ConfigError("linear kernel slope must be positive")

    def evaluate(self, x):
        return -self.a * np.asarray(x, dtype=np.float64)

    def sup_norm(self, d):
        raise UnboundedKernel("linear kernel has no finite sup norm")

    def pair_mean(self, X):
        # -a (X_i - mean_{j != i} X_j); the self term vanishes so the running
        # sum over all j can be corrected by subtracting X_i.
        N = X.shape[-2]
        total = X.sum(axis=-2, keepdims=True)
        return -self.a * (X - (total - X) / (N - 1))

    def convolution_state(self, points):
        return np.asarray(points, dtype=np.float64).mean(axis=0)

    def convolve(self, state, x):
        return -self.a * (np.asarray(x, dtype=np.float64) - state)


def kernel_eval(kernel: Kernel, x) -> np.ndarray:
    """Evaluate K on a d-vector (or batch of d-vectors)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        raise DimensionMismatch("kernel input must have at least one axis")
    return kernel.evaluate(x)


def kernel_sup_norm(kernel: Kernel, d: int) -> float:
    """Analytic sup norm of a bounded kernel acting on R^d."""
    if not kernel.bounded:
        raise UnboundedKernel(f"{type(kernel).__name__} is not bounded")
    return kernel.sup_norm(d)


# ---------------------------------------------------------------------------
# Diffusion parameters
# ---------------------------------------------------------------------------


def lambda_min_of(sigma) -> float:
    """Smallest eigenvalue of sigma sigma^T via a symmetric eigensolve.

    Raises DegenerateDiffusion at or below the 1e-10 tolerance that separates
    genuine degeneracy from round-off.
    """
    sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    lam = sigma @ sigma.T
    lo = float(np.linalg.eigvalsh(lam)[0])
    if lo <= DEGENERACY_TOL:
        raise DegenerateDiffusion(f"min eig(sigma sigma^T) = {lo:.3e} <= 1e-10")
    return lo


@dataclass(frozen=True)
class SystemParams:
    """Masses, damping and diffusion for a particle system.

    ``sigma`` is the d x d' diffusion matrix; ``lambda_mat`` is always
    recomputed as sigma sigma^T.  Construction tolerates a degenerate sigma
    (the plain integrators allow sigma = 0) but every KL-bound operation
    calls :meth:`require_nondegenerate` first.
    """

    d: int
    d_prime: int
    sigma: np.ndarray
    m: float = 1.0
    gamma: float = 0.0
    lambda_mat: np.ndarray = field(init=False)
    lambda_min: float = field(init=False)

    def __post_init__(self):
        if self.d < 1 or self.d_prime < 1:
            raise ConfigError("dimensions must be positive")
        if not (self.m > 0):
            raise ConfigError("mass must be positive")
        if self.gamma < 0:
            raise ConfigError("damping must be nonnegative")
        sig = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        if sig.shape != (self.d, self.d_prime):
            raise DimensionMismatch(
                f"sigma shape {sig.shape}, expected ({self.d}, {self.d_prime})"
            )
        lam = sig @ sig.T
        lam = 0.5 * (lam + lam.T)
        sig.setflags(write=False)
        lam.setflags(write=False)
        object.__setattr__(self, "sigma", sig)
        object.__setattr__(self, "lambda_mat", lam)
        object.__setattr__(self, "lambda_min", float(np.linalg.eigvalsh(lam)[0]))

    @classmethod
    def from_sigma(cls, sigma, d: Optional[int] = None, m: float = 1.0,
                   gamma: float = 0.0) -> "SystemParams":
        """Build from a scalar (sigma * I_d), diagonal vector, or full matrix."""
        arr = np.asarray(sigma, dtype=np.float64)
        if arr.ndim == 0:
            if d is None:
                d = 1
            arr = float(arr) * np.eye(d)
        elif arr.ndim == 1:
            if d is not None and d != arr.size:
                raise DimensionMismatch("diagonal sigma length does not match d")
            arr = np.diag(arr)
        elif d is not None and arr.shape[0] != d:
            raise DimensionMismatch("sigma row count does not match d")
        return cls(d=arr.shape[0], d_prime=arr.shape[1], sigma=arr, m=m, gamma=gamma)

    def require_nondegenerate(self) -> None:
        if self.lambda_min <= DEGENERACY_TOL:
            raise DegenerateDiffusion(
                f"min eig(sigma sigma^T) = {self.lambda_min:.3e} <= 1e-10"
            )

    @property
    def weight_matrix(self) -> np.ndarray:
        """sigma^T (sigma sigma^T)^{-1}, the projection used by weighted mismatches."""
        self.require_nondegenerate()
        return self.sigma.T @ np.linalg.inv(self.lambda_mat)


# ---------------------------------------------------------------------------
# Time grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_n = T with t_k = k dt."""

    T: float
    dt: float
    n_steps: int = field(init=False)

    def __post_init__(self):
        if not (self.T > 0 and self.dt > 0):
            raise ConfigError("horizon and step must be positive")
        n = int(round(self.T / self.dt))
        if n < 1 or abs(n * self.dt - self.T) > 1e-12 * max(self.T, 1.0):
            raise ConfigError(
                f"dt={self.dt} does not divide T={self.T} evenly"
            )
        object.__setattr__(self, "n_steps", n)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def step_of(self, t: float) -> int:
        """Nearest grid step to a time in [0, T]."""
        if t < -1e-12 or t > self.T + 1e-12:
            raise ConfigError(f"time {t} outside [0, {self.T}]")
        return min(self.n_steps, max(0, int(round(t / self.dt))))


# ---------------------------------------------------------------------------
# Initial laws (chaotic: one particle at a time, i.i.d.)
# ---------------------------------------------------------------------------


class InitialLaw:
    """Per-particle initial law.  Particles are always sampled i.i.d., so the
    joint initial condition is the tensor power of this law."""

    dim: int

    def sample(self, stream: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def uses_stream(self) -> bool:
        return True


class GaussianIID(InitialLaw):
    def __init__(self, mean, cov=1.0):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        self.dim = self.mean.size
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim == 0:
            cov = float(cov) * np.eye(self.dim)
        elif cov.ndim == 1:
            if cov.size != self.dim:
                raise DimensionMismatch("diagonal covariance length mismatch")
            cov = np.diag(cov)
        if cov.shape != (self.dim, self.dim):
            raise DimensionMismatch("covariance shape mismatch")
        try:
            self._chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ConfigError("initial covariance must be positive definite") from exc
        self.cov = cov

    def sample(self, stream):
        return self.mean + self._chol @ stream.standard_normal(self.dim)


class DeterministicPoint(InitialLaw):
    def __init__(self, point):
        self.point = np.atleast_1d(np.asarray(point, dtype=np.float64))
        self.dim = self.point.size

    def sample(self, stream):
        return self.point.copy()

    def uses_stream(self):
        return False


class EmpiricalInit(InitialLaw):
    """Draw i.i.d. (with replacement) from the rows of a point file or array."""

    def __init__(self, source):
        if isinstance(source, (str,)):
            pts = np.loadtxt(source, dtype=np.float64, ndmin=2)
        else:
            pts = np.atleast_2d(np.asarray(source, dtype=np.float64))
        if pts.shape[0] < 1:
            raise ConfigError("empirical initial law needs at least one point")
        self.points = pts
        self.dim = pts.shape[1]

    def sample(self, stream):
        idx = int(stream.integers(0, self.points.shape[0]))
        return self.points[idx].copy()


# ---------------------------------------------------------------------------
# Random stream policy
# ---------------------------------------------------------------------------

DOMAIN_PATHS = 0
DOMAIN_CLOUD = 1
DOMAIN_RESAMPLE = 2
DOMAIN_AUX = 3

_MAX_SEED = 1 << 64
_MAX_REALIZATION = 1 << 32
_MAX_PARTICLE = 1 << 28


@dataclass(frozen=True)
class RngPolicy:
    """Counter-based Gaussian streams keyed by (seed, domain, realization, particle).

    Each key owns an independent Philox stream; within a stream, draws are
    consumed in a fixed documented order (initial-condition draws first, then
    noise increments step-major).  The value at any (seed, realization,
    particle, step) index is therefore a pure function of the key, identical
    under any execution order, chunking or thread count.
    """

    master_seed: int

    def __post_init__(self):
        if not (0 <= self.master_seed < _MAX_SEED):
            raise ConfigError("master seed must fit in 64 bits")

    def stream(self, domain: int, realization: int, particle: int = 0) -> np.random.Generator:
        if not (0 <= domain < 16):
            raise ConfigError("stream domain out of range")
        if not (0 <= realization < _MAX_REALIZATION):
            raise ConfigError("realization index out of range")
        if not (0 <= particle < _MAX_PARTICLE):
            raise ConfigError("particle index out of range")
        key = (self.master_seed << 64) | (domain << 60) | (realization << 28) | particle
        return np.random.Generator(np.random.Philox(key=key))
