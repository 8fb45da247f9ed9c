"""Closed-form propagation of linear-kernel systems and exact KL values.

With K(x) = -a x the interacting and mean-field systems are linear, so their
laws stay Gaussian and exchangeable: the joint covariance over N particles is
I (x) (s - c) + J (x) c for a per-particle block s and a cross-particle block
c (scalars for the first-order system in one dimension, 2x2 position/velocity
blocks for the second-order system).  Such matrices diagonalize into s - c
with multiplicity N-1 and s + (N-1) c with multiplicity 1, which makes the
KL divergence against the tensorized mean-field Gaussian available in closed
form for the joint law and for every k-particle marginal.

Covariance blocks evolve by the coupled Lyapunov system

    s' = A s + s A^T + B c + c B^T + G
    c' = A c + c A^T + B u + u B^T,     u = (s + (N-2) c)/(N-1)

with (A, B, G) = (-a, a, lambda) for first order and

    A = [[0, 1], [-a/m, -gamma/m]],  B = [[0, 0], [a/m, 0]],
    G = [[0, 0], [0, lambda/m^2]]

for second order; the mean-field marginal covariance follows
sbar' = A sbar + sbar A^T + G.  Everything is integrated with classical RK4
at one tenth of the grid step, so integrator error is negligible against the
Monte Carlo estimates this module is used to validate.  A dense kN x kN
Lyapunov integrator is included to cross-check the exchangeable reduction.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from .errors import ConfigError, OraclePDFailure
from .model import SystemParams, TimeGrid

__all__ = [
    "ExchangeableGaussian",
    "OracleTrajectory",
    "MeanFieldTrajectory",
    "propagate_interacting",
    "propagate_meanfield",
    "meanfield_variance_closed_form",
    "exact_joint_kl",
    "exact_marginal_kl",
    "dense_covariance",
    "dense_gaussian_kl",
    "dense_lyapunov_interacting",
]

_PD_TOL = 0.0  # blocks must be strictly positive definite


def _as_block(x) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if arr.shape[0] != arr.shape[1]:
        raise ConfigError("covariance blocks must be square")
    return arr


@dataclass(frozen=True)
class ExchangeableGaussian:
    """Exchangeable Gaussian over N particles with block structure.

    Full covariance I (x) (s - c) + J (x) c; positive definiteness requires
    s - c > 0 and s + (N-1) c > 0 in the eigenvalue sense, which construction
    enforces.
    """

    N: int
    mean: np.ndarray
    s: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        if self.N < 1:
            raise ConfigError("need at least one particle")
        s = _as_block(self.s)
        c = _as_block(self.c)
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        if s.shape != c.shape or mean.size != s.shape[0]:
            raise ConfigError("mean, s and c must share the block size")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "mean", mean)
        for name, blk in (("s - c", self.eig_minus), ("s + (N-1)c", self.eig_plus)):
            if np.linalg.eigvalsh(blk)[0] <= _PD_TOL:
                raise OraclePDFailure(float("nan"), f"block {name} not positive definite")

    @property
    def block_size(self) -> int:
        return self.s.shape[0]

    @property
    def eig_minus(self) -> np.ndarray:
        """Eigen-block s - c, multiplicity N-1."""
        return self.s - self.c

    @property
    def eig_plus(self) -> np.ndarray:
        """Eigen-block s + (N-1) c, multiplicity 1."""
        return self.s + (self.N - 1) * self.c

    def marginal(self, k: int) -> "ExchangeableGaussian":
        """k-particle marginal: same (mean, s, c) with N replaced by k."""
        if not (1 <= k <= self.N):
            raise ConfigError(f"marginal size {k} outside [1, {self.N}]")
        return ExchangeableGaussian(N=k, mean=self.mean, s=self.s, c=self.c)


# ---------------------------------------------------------------------------
# Covariance ODEs
# ---------------------------------------------------------------------------


def _system_blocks(a: float, params: SystemParams, order: str):
    if params.d != 1:
        raise ConfigError("the Gaussian oracle covers one spatial dimension")
    lam = float(params.lambda_mat[0, 0])
    if order == "first":
        A = np.array([[-a]])
        B = np.array([[a]])
        G = np.array([[lam]])
    elif order == "second":
        m, gamma = params.m, params.gamma
        A = np.array([[0.0, 1.0], [-a / m, -gamma / m]])
        B = np.array([[0.0, 0.0], [a / m, 0.0]])
        G = np.array([[0.0, 0.0], [0.0, lam / (m * m)]])
    else:
        raise ConfigError(f"unknown order {order!r}")
    return A, B, G


def _rk4(f, y, h, substeps):
    for _ in range(substeps):
        k1 = f(y)
        k2 = f(tuple(u + 0.5 * h * v for u, v in zip(y, k1)))
        k3 = f(tuple(u + 0.5 * h * v for u, v in zip(y, k2)))
        k4 = f(tuple(u + h * v for u, v in zip(y, k3)))
        y = tuple(
            u + (h / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
            for u, a1, a2, a3, a4 in zip(y, k1, k2, k3, k4)
        )
    return y


@dataclass(frozen=True)
class OracleTrajectory:
    """Block covariance trajectory of the interacting linear system."""

    N: int
    grid: TimeGrid
    mean: np.ndarray
    s: np.ndarray  # (n_steps+1, k, k)
    c: np.ndarray

    def state_at(self, step: int) -> ExchangeableGaussian:
        return ExchangeableGaussian(N=self.N, mean=self.mean,
                                    s=self.s[step], c=self.c[step])


@dataclass(frozen=True)
class MeanFieldTrajectory:
    grid: TimeGrid
    mean: np.ndarray
    sbar: np.ndarray  # (n_steps+1, k, k)


def propagate_interacting(a: float, params: SystemParams, N: int,
                          init: ExchangeableGaussian, grid: TimeGrid,
                          substeps: int = 10) -> OracleTrajectory:
    """Integrate the coupled (s, c) Lyapunov blocks on the grid.

    The per-particle mean is constant for the exchangeable linear system, so
    only covariance blocks evolve.  Positive definiteness of both eigen
    blocks is verified at every grid point.
    """
    if a <= 0:
        raise ConfigError("oracle slope must be positive")
    if N < 2:
        raise ConfigError("interacting oracle needs N >= 2")
    order = "first" if init.block_size == 1 else "second"
    A, B, G = _system_blocks(a, params, order)
    At, Bt = A.T, B.T

    def rhs(y):
        s, c = y
        u = (s + (N - 2) * c) / (N - 1)
        ds = A @ s + s @ At + B @ c + c @ Bt + G
        dc = A @ c + c @ At + B @ u + u @ Bt
        return (ds, dc)

    S = grid.n_steps
    h = grid.dt / substeps
    k = init.block_size
    s_traj = np.empty((S + 1, k, k))
    c_traj = np.empty((S + 1, k, k))
    s_traj[0], c_traj[0] = init.s, init.c
    y = (init.s.copy(), init.c.copy())
    for n in range(S):
        y = _rk4(rhs, y, h, substeps)
        s_traj[n + 1], c_traj[n + 1] = y
        if (
            np.linalg.eigvalsh(y[0] - y[1])[0] <= 0
            or np.linalg.eigvalsh(y[0] + (N - 1) * y[1])[0] <= 0
        ):
            raise OraclePDFailure(grid.times[n + 1])
    return OracleTrajectory(N=N, grid=grid, mean=init.mean, s=s_traj, c=c_traj)


def propagate_meanfield(a: float, params: SystemParams, init_mean, init_sbar,
                        grid: TimeGrid, order: str = "first",
                        substeps: int = 10) -> MeanFieldTrajectory:
    """Mean-field marginal covariance sbar on the grid; the mean is constant."""
    if a <= 0:
        raise ConfigError("oracle slope must be positive")
    A, _, G = _system_blocks(a, params, order)
    At = A.T

    def rhs(y):
        (sbar,) = y
        return (A @ sbar + sbar @ At + G,)

    S = grid.n_steps
    sbar0 = _as_block(init_sbar)
    k = sbar0.shape[0]
    traj = np.empty((S + 1, k, k))
    traj[0] = sbar0
    y = (sbar0.copy(),)
    h = grid.dt / substeps
    for n in range(S):
        y = _rk4(rhs, y, h, substeps)
        traj[n + 1] = y[0]
    mean = np.atleast_1d(np.asarray(init_mean, dtype=np.float64))
    return MeanFieldTrajectory(grid=grid, mean=mean, sbar=traj)


def meanfield_variance_closed_form(a: float, lam: float, sbar0: float, t) -> np.ndarray:
    """First-order closed form: sbar(t) = lam/(2a) + (sbar0 - lam/(2a)) e^{-2at}."""
    t = np.asarray(t, dtype=np.float64)
    eq = lam / (2.0 * a)
    return eq + (sbar0 - eq) * np.exp(-2.0 * a * t)


# ---------------------------------------------------------------------------
# Exact KL values
# ---------------------------------------------------------------------------


def _kl_piece(ref: np.ndarray, blk: np.ndarray) -> float:
    """tr(ref^{-1} blk) - k + log det(ref)/det(blk) for one eigen block."""
    k = ref.shape[0]
    sol = np.linalg.solve(ref, blk)
    sign_r, logdet_r = np.linalg.slogdet(ref)
    sign_b, logdet_b = np.linalg.slogdet(blk)
    if sign_r <= 0 or sign_b <= 0:
        raise OraclePDFailure(float("nan"), "KL needs positive definite blocks")
    return float(np.trace(sol)) - k + float(logdet_r - logdet_b)


def exact_joint_kl(P: ExchangeableGaussian, sbar, ref_mean=None) -> float:
    """KL of the exchangeable joint against the tensorized reference.

    Uses the shared eigenstructure: eigen blocks s - c (multiplicity N-1) and
    s + (N-1) c (multiplicity 1) against the reference block sbar on every
    factor, plus the mean term N delta^T sbar^{-1} delta.
    """
    ref = _as_block(sbar)
    if ref.shape != P.s.shape:
        raise ConfigError("reference block size differs from state block size")
    kl = 0.5 * ((P.N - 1) * _kl_piece(ref, P.eig_minus) + _kl_piece(ref, P.eig_plus))
    if ref_mean is not None:
        delta = P.mean - np.atleast_1d(np.asarray(ref_mean, dtype=np.float64))
        kl += 0.5 * P.N * float(delta @ np.linalg.solve(ref, delta))
    return kl


def exact_marginal_kl(P: ExchangeableGaussian, k: int, sbar, ref_mean=None) -> float:
    """KL of the k-particle marginal against the k-fold reference."""
    return exact_joint_kl(P.marginal(k), sbar, ref_mean=ref_mean)


# ---------------------------------------------------------------------------
# Dense cross-checks
# ---------------------------------------------------------------------------


def dense_covariance(P: ExchangeableGaussian) -> np.ndarray:
    """Explicit (N k) x (N k) covariance I (x) (s - c) + J (x) c."""
    eye = np.eye(P.N)
    ones = np.ones((P.N, P.N))
    return np.kron(eye, P.s - P.c) + np.kron(ones, P.c)


def dense_gaussian_kl(mean_p, cov_p, mean_q, cov_q) -> float:
    """Textbook Gaussian KL on explicit dense matrices."""
    cov_p = np.atleast_2d(cov_p)
    cov_q = np.atleast_2d(cov_q)
    n = cov_p.shape[0]
    delta = np.atleast_1d(mean_q) - np.atleast_1d(mean_p)
    sol = np.linalg.solve(cov_q, cov_p)
    sign_q, logdet_q = np.linalg.slogdet(cov_q)
    sign_p, logdet_p = np.linalg.slogdet(cov_p)
    if sign_q <= 0 or sign_p <= 0:
        raise OraclePDFailure(float("nan"), "KL needs positive definite covariances")
    quad = float(delta @ np.linalg.solve(cov_q, delta))
    return 0.5 * (float(np.trace(sol)) - n + quad + float(logdet_q - logdet_p))


def dense_lyapunov_interacting(a: float, params: SystemParams, N: int,
                               init: ExchangeableGaussian, grid: TimeGrid,
                               substeps: int = 10):
    """Integrate the full (N k) x (N k) Lyapunov equation, no reduction.

    Returns the (s, c) blocks read off the dense solution at every grid
    point, for cross-validation of the exchangeable two-block system.
    """
    order = "first" if init.block_size == 1 else "second"
    A, B, G = _system_blocks(a, params, order)
    k = init.block_size
    coupling = B / (N - 1)
    A_full = np.kron(np.eye(N), A - coupling) + np.kron(np.ones((N, N)), coupling)
    G_full = np.kron(np.eye(N), G)
    At_full = A_full.T

    def rhs(y):
        (cov,) = y
        return (A_full @ cov + cov @ At_full + G_full,)

    S = grid.n_steps
    h = grid.dt / substeps
    s_traj = np.empty((S + 1, k, k))
    c_traj = np.empty((S + 1, k, k))
    cov = dense_covariance(init)
    s_traj[0], c_traj[0] = cov[:k, :k], cov[:k, k : 2 * k]
    y = (cov,)
    for n in range(S):
        y = _rk4(rhs, y, h, substeps)
        s_traj[n + 1] = y[0][:k, :k]
        c_traj[n + 1] = y[0][:k, k : 2 * k]
    return s_traj, c_traj
