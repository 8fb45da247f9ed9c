"""Euler-Maruyama simulation of interacting and mean-field particle systems.

Two families of dynamics share one stepping rule and one noise layout:

* interacting, first order:
    X_{n+1} = X_n + [b(X_i) + (1/(N-1)) sum_{j!=i} K(X_i - X_j)] dt + sigma dW_n
* interacting, second order:
    X_{n+1} = X_n + V_n dt
    V_{n+1} = V_n + (1/m) [(1/(N-1)) sum_{j!=i} K(X_i - X_j) - gamma V_n] dt
                  + (1/m) sigma dW_n
* mean-field driven: the pairwise sum is replaced by the frozen-cloud
  convolution (K * rho_t)(X_i) evaluated at the left grid endpoint.

A mean-field-driven run with the same (seed, realization) as an interacting
run consumes bit-identical Brownian increments (synchronous coupling), which
keeps pathwise comparisons low-variance.

The module also provides the deterministic solution map that integrates the
mean-field dynamics driven by an arbitrary noise path theta: feeding it the
increments b dt + sigma dW extracted from an interacting run reproduces that
run, and feeding it sigma dW from a mean-field run reproduces that run
bit-for-bit.  ``run_ensemble`` is the vectorized many-realization core used
by the divergence functionals; it accumulates statistics instead of storing
paths and reduces chunk results in a fixed order, so its output does not
depend on chunk size or thread count.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatch,
    GridMismatch,
    NumericalBlowup,
    TooFewParticles,
)
from .model import (
    DOMAIN_CLOUD,
    DOMAIN_PATHS,
    InitialLaw,
    Kernel,
    RngPolicy,
    SystemParams,
    TimeGrid,
)

__all__ = [
    "PathBundle",
    "ReferenceCloud",
    "NoisePath",
    "simulate_interacting_2nd",
    "simulate_interacting_1st",
    "simulate_meanfield_driven",
    "build_reference_cloud",
    "meanfield_drift",
    "solution_map_phi",
    "replay_paths",
    "time_marginal",
    "extract_noise_theta1",
    "extract_noise_theta2",
    "run_ensemble",
    "EnsembleStats",
    "write_cloud",
    "read_cloud",
]

_MAX_REALIZATION = (1 << 32) - 1


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PathBundle:
    """One realization of an N-particle system on a time grid.

    ``X`` has shape (n_steps+1, N, d); ``V`` likewise for second order, else
    None; ``dW`` holds the raw Brownian increments, shape (n_steps, N, d').
    Re-applying the integrator to (initial state, dW) reproduces the stored
    states bit-for-bit.
    """

    order: str
    N: int
    grid: TimeGrid
    params: SystemParams
    X: np.ndarray
    V: Optional[np.ndarray]
    dW: np.ndarray
    driver: str
    realization: int
    master_seed: int

    def __post_init__(self):
        S, N, d = self.grid.n_steps, self.N, self.params.d
        if self.X.shape != (S + 1, N, d):
            raise DimensionMismatch(f"X shape {self.X.shape}, expected {(S + 1, N, d)}")
        if self.dW.shape != (S, N, self.params.d_prime):
            raise DimensionMismatch("dW shape inconsistent with grid")
        if self.order == "second" and (self.V is None or self.V.shape != self.X.shape):
            raise DimensionMismatch("second-order bundle needs matching V")
        for arr in (self.X, self.V, self.dW):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def initial_state(self):
        if self.order == "second":
            return self.X[0], self.V[0]
        return self.X[0]


@dataclass
class ReferenceCloud:
    """Frozen M-particle approximation of the mean-field law on a grid.

    Snapshots have shape (n_steps+1, M, state_dim) with state_dim = d for
    first order and 2d (positions then velocities) for second order.  Drift
    queries reference only the snapshot at the queried step; per-kernel
    convolution summaries are cached lazily.
    """

    M: int
    order: str
    d: int
    grid: TimeGrid
    snapshots: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        S = self.grid.n_steps
        sdim = self.d if self.order == "first" else 2 * self.d
        if self.snapshots.shape != (S + 1, self.M, sdim):
            raise DimensionMismatch(
                f"snapshot shape {self.snapshots.shape}, expected {(S + 1, self.M, sdim)}"
            )
        if self.M < 1:
            raise ConfigError("cloud must contain at least one particle")
        self.snapshots.setflags(write=False)
        self._conv_cache: dict = {}

    def positions(self, step: int) -> np.ndarray:
        return self.snapshots[step, :, : self.d]

    def _summaries(self, kernel: Kernel):
        """Per-step convolution summaries for a kernel, cached."""
        if kernel not in self._conv_cache:
            states = [
                kernel.convolution_state(self.positions(n))
                for n in range(self.grid.n_steps + 1)
            ]
            self._conv_cache[kernel] = states
        return self._conv_cache[kernel]

    def convolve_at(self, kernel: Kernel, step: int, x: np.ndarray) -> np.ndarray:
        """(1/M) sum_m K(x - Y_m(t_step)) evaluated at states x of shape (..., d)."""
        if not (0 <= step <= self.grid.n_steps):
            raise GridMismatch(f"step {step} outside cloud grid")
        return kernel.convolve(self._summaries(kernel)[step], x)

    def convolve_path(self, kernel: Kernel, X_path: np.ndarray) -> np.ndarray:
        """Convolution at every step of a path array (n_steps+1, N, d)."""
        S = self.grid.n_steps
        if X_path.shape[0] != S + 1:
            raise GridMismatch("path length does not match cloud grid")
        out = np.empty_like(X_path)
        for n in range(S + 1):
            out[n] = self.convolve_at(kernel, n, X_path[n])
        return out


@dataclass(frozen=True)
class NoisePath:
    """Cumulative driving process theta_i(t_n), stored with its increments.

    ``increments`` (n_steps, N, d) are the primary data; ``values`` is the
    cumulative sum with theta(t_0) = 0.  Keeping the increments avoids the
    round-off a difference of cumulative values would reintroduce.
    """

    grid: TimeGrid
    increments: np.ndarray
    values: np.ndarray = field(init=False)

    def __post_init__(self):
        S = self.grid.n_steps
        if self.increments.shape[0] != S:
            raise GridMismatch("increment count does not match grid")
        vals = np.zeros((S + 1,) + self.increments.shape[1:])
        np.cumsum(self.increments, axis=0, out=vals[1:])
        self.increments.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)


# ---------------------------------------------------------------------------
# Noise layout
# ---------------------------------------------------------------------------


def _draw_initials_and_increments(
    init: InitialLaw,
    N: int,
    n_steps: int,
    d_prime: int,
    dt: float,
    rng: RngPolicy,
    domain: int,
    realization: int,
):
    """Initial states and Brownian increments for one realization.

    Stream (domain, realization, i) feeds particle i: initial-condition draws
    first, then the (n_steps, d_prime) increment block in step-major order.
    Increments are centered Gaussians of variance dt per coordinate.
    """
    root_dt = np.sqrt(dt)
    state0 = np.empty((N, init.dim))
    dW = np.empty((n_steps, N, d_prime))
    for i in range(N):
        g = rng.stream(domain, realization, i)
        state0[i] = init.sample(g)
        dW[:, i, :] = root_dt * g.standard_normal((n_steps, d_prime))
    return state0, dW


# ---------------------------------------------------------------------------
# Stepping rules (shared by every simulation entry point)
# ---------------------------------------------------------------------------


def _step_first(X, drift, noise, dt):
    return X + drift * dt + noise


def _step_second(X, V, interaction, noise, dt, gamma, m):
    X_next = X + V * dt
    V_next = V + ((interaction - gamma * V) * dt + noise) / m
    return X_next, V_next


def _check_finite(state, step):
    if not np.isfinite(state).all():
        raise NumericalBlowup(step)


# ---------------------------------------------------------------------------
# Single-realization simulations
# ---------------------------------------------------------------------------


def _drift_interacting(kernel, X, b_ext):
    pm = kernel.pair_mean(X)
    if b_ext is not None:
        pm = pm + b_ext(X)
    return pm


def _drift_meanfield(kernel, cloud, step, X, b_ext):
    cv = cloud.convolve_at(kernel, step, X)
    if b_ext is not None:
        cv = cv + b_ext(X)
    return cv


def _simulate_single(
    params: SystemParams,
    kernel: Kernel,
    init: InitialLaw,
    grid: TimeGrid,
    N: int,
    rng: RngPolicy,
    realization: int,
    *,
    order: str,
    driver: str,
    cloud: Optional[ReferenceCloud] = None,
    drift_b: Optional[Callable] = None,
    domain: int = DOMAIN_PATHS,
) -> PathBundle:
    if driver == "interacting" and N < 2:
        raise TooFewParticles("interacting dynamics need N >= 2")
    if N < 1:
        raise TooFewParticles("need at least one particle")
    if driver == "meanfield":
        if cloud is None:
            raise ConfigError("mean-field driver needs a reference cloud")
        if cloud.grid != grid:
            raise GridMismatch("cloud grid differs from simulation grid")
        if cloud.order != order:
            raise GridMismatch("cloud order differs from simulation order")
    sdim = params.d if order == "first" else 2 * params.d
    if init.dim != sdim:
        raise DimensionMismatch(f"initial law dimension {init.dim}, expected {sdim}")

    S, d = grid.n_steps, params.d
    dt = grid.dt
    state0, dW = _draw_initials_and_increments(
        init, N, S, params.d_prime, dt, rng, domain, realization
    )
    sigmaT = np.ascontiguousarray(params.sigma.T)

    X = np.empty((S + 1, N, d))
    V = np.empty((S + 1, N, d)) if order == "second" else None
    if order == "second":
        X[0], V[0] = state0[:, :d], state0[:, d:]
    else:
        X[0] = state0

    for n in range(S):
        if driver == "interacting":
            drift = _drift_interacting(kernel, X[n], drift_b)
        else:
            drift = _drift_meanfield(kernel, cloud, n, X[n], drift_b)
        noise = dW[n] @ sigmaT
        if order == "second":
            X[n + 1], V[n + 1] = _step_second(
                X[n], V[n], drift, noise, dt, params.gamma, params.m
            )
            _check_finite(V[n + 1], n + 1)
        else:
            X[n + 1] = _step_first(X[n], drift, noise, dt)
        _check_finite(X[n + 1], n + 1)

    return PathBundle(
        order=order,
        N=N,
        grid=grid,
        params=params,
        X=X,
        V=V,
        dW=dW,
        driver=driver,
        realization=realization,
        master_seed=rng.master_seed,
    )


def simulate_interacting_2nd(params, kernel, init, grid, N, rng, realization=0):
    """Second-order interacting system, one realization."""
    return _simulate_single(
        params, kernel, init, grid, N, rng, realization,
        order="second", driver="interacting",
    )


def simulate_interacting_1st(params, kernel, init, grid, N, rng, realization=0,
                             drift_b: Optional[Callable] = None):
    """First-order interacting system with optional non-interaction drift b."""
    return _simulate_single(
        params, kernel, init, grid, N, rng, realization,
        order="first", driver="interacting", drift_b=drift_b,
    )


def simulate_meanfield_driven(params, kernel, cloud, init, grid, N, rng,
                              realization=0, order="first",
                              drift_b: Optional[Callable] = None):
    """Mean-field driven system: pairwise sums replaced by the cloud drift.

    Uses the same keyed noise increments as the interacting run for the same
    (seed, realization).
    """
    return _simulate_single(
        params, kernel, init, grid, N, rng, realization,
        order=order, driver="meanfield", cloud=cloud, drift_b=drift_b,
    )


def meanfield_drift(cloud: ReferenceCloud, kernel: Kernel, step: int, x) -> np.ndarray:
    """(1/M) sum_m K(x - Y_m(t_step)) over the cloud snapshot at one step."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != cloud.d:
        raise DimensionMismatch(f"query dimension {x.shape[-1]}, cloud dimension {cloud.d}")
    return cloud.convolve_at(kernel, step, x)


# ---------------------------------------------------------------------------
# Reference cloud construction
# ---------------------------------------------------------------------------


def build_reference_cloud(params, kernel, init, grid, M, rng, refine_iters=1,
                          order="first", drift_b=None) -> ReferenceCloud:
    """Large-M approximation of the mean-field law.

    Iteration 0 simulates an M-particle interacting system.  Each refinement
    re-simulates the M particles driven by the previous iteration's frozen
    convolution drift (a Picard step) reusing the same noise, so successive
    iterations converge pathwise.  Cloud noise is drawn from per-step streams
    in the dedicated cloud domain; initial conditions come from one stream
    with a reserved index, so cloud randomness never collides with path
    ensembles under the same master seed.
    """
    if M < 100:
        raise ConfigError("reference cloud needs M >= 100")
    sdim = params.d if order == "first" else 2 * params.d
    if init.dim != sdim:
        raise DimensionMismatch(f"initial law dimension {init.dim}, expected {sdim}")
    S, d, dt = grid.n_steps, params.d, grid.dt
    sigmaT = np.ascontiguousarray(params.sigma.T)

    g0 = rng.stream(DOMAIN_CLOUD, _MAX_REALIZATION, 0)
    state0 = np.stack([init.sample(g0) for _ in range(M)])

    def run(drift_of):
        snaps = np.empty((S + 1, M, sdim))
        X = state0[:, :d].copy()
        V = state0[:, d:].copy() if order == "second" else None
        snaps[0] = state0
        root_dt = np.sqrt(dt)
        for n in range(S):
            dWn = root_dt * rng.stream(DOMAIN_CLOUD, n, 0).standard_normal(
                (M, params.d_prime)
            )
            drift = drift_of(n, X)
            if drift_b is not None:
                drift = drift + drift_b(X)
            noise = dWn @ sigmaT
            if order == "second":
                X, V = _step_second(X, V, drift, noise, dt, params.gamma, params.m)
                snaps[n + 1, :, :d], snaps[n + 1, :, d:] = X, V
                _check_finite(V, n + 1)
            else:
                X = _step_first(X, drift, noise, dt)
                snaps[n + 1] = X
            _check_finite(X, n + 1)
        return snaps

    snapshots = run(lambda n, X: kernel.pair_mean(X))
    for _ in range(refine_iters):
        prev = ReferenceCloud(M=M, order=order, d=d, grid=grid, snapshots=snapshots)
        snapshots = run(lambda n, X: prev.convolve_at(kernel, n, X))

    provenance = {
        "kernel": repr(kernel),
        "order": order,
        "M": M,
        "refine_iters": refine_iters,
        "master_seed": rng.master_seed,
        "T": grid.T,
        "dt": grid.dt,
    }
    return ReferenceCloud(M=M, order=order, d=d, grid=grid,
                          snapshots=snapshots, provenance=provenance)


# ---------------------------------------------------------------------------
# Solution map and noise extraction
# ---------------------------------------------------------------------------


def solution_map_phi(theta: NoisePath, params, kernel, cloud, initial_state,
                     order="first", drift_b=None) -> PathBundle:
    """Deterministic mean-field dynamics driven by a prescribed noise path.

    The discrete analogue of the pathwise solution map: the stochastic term
    sigma dW is replaced by the increments of theta.  Feeding increments
    extracted from a stored run reproduces that run (exactly for sigma dW,
    up to float reassociation for the mismatch-corrected increments).
    """
    grid = cloud.grid
    if theta.grid != grid:
        raise GridMismatch("noise path grid differs from cloud grid")
    S, d, dt = grid.n_steps, params.d, grid.dt
    N = theta.increments.shape[1]

    X = np.empty((S + 1, N, d))
    V = np.empty((S + 1, N, d)) if order == "second" else None
    if order == "second":
        X0, V0 = initial_state
        X[0], V[0] = X0, V0
    else:
        X[0] = initial_state

    for n in range(S):
        drift = _drift_meanfield(kernel, cloud, n, X[n], drift_b)
        dtheta = theta.increments[n]
        if order == "second":
            X[n + 1], V[n + 1] = _step_second(
                X[n], V[n], drift, dtheta, dt, params.gamma, params.m
            )
        else:
            X[n + 1] = _step_first(X[n], drift, dtheta, dt)
        _check_finite(X[n + 1], n + 1)

    return PathBundle(
        order=order, N=N, grid=grid, params=params, X=X, V=V,
        dW=np.zeros((S, N, params.d_prime)), driver="phi",
        realization=-1, master_seed=0,
    )


def extract_noise_theta2(bundle: PathBundle) -> NoisePath:
    """theta^(2) = sigma W, reconstructed increment by increment."""
    sigmaT = np.ascontiguousarray(bundle.params.sigma.T)
    return NoisePath(grid=bundle.grid, increments=bundle.dW @ sigmaT)


def extract_noise_theta1(bundle: PathBundle, cloud: ReferenceCloud,
                         kernel: Kernel, drift_b=None) -> NoisePath:
    """theta^(1): increments b_i dt + sigma dW with b_i the drift mismatch.

    b_i(t_n) = (1/(N-1)) sum_{j!=i} K(X_i - X_j) - (K * rho_{t_n})(X_i),
    evaluated along the bundle's stored positions (left endpoints).
    """
    if cloud.grid != bundle.grid:
        raise GridMismatch("cloud grid differs from bundle grid")
    sigmaT = np.ascontiguousarray(bundle.params.sigma.T)
    S = bundle.grid.n_steps
    inc = np.empty((S, bundle.N, bundle.params.d))
    for n in range(S):
        b = kernel.pair_mean(bundle.X[n]) - cloud.convolve_at(kernel, n, bundle.X[n])
        inc[n] = b * bundle.grid.dt + bundle.dW[n] @ sigmaT
    return NoisePath(grid=bundle.grid, increments=inc)


def replay_paths(params: SystemParams, kernel: Kernel, grid: TimeGrid,
                 initial_state, dW: np.ndarray, *, order: str = "first",
                 driver: str = "interacting", cloud: Optional[ReferenceCloud] = None,
                 drift_b: Optional[Callable] = None, full_paths: bool = True):
    """Re-apply the integrator to (initial state, dW).

    Accepts arbitrary leading batch axes: ``dW`` shaped (..., n_steps, N, d')
    with matching initial states.  On a stored bundle's own data this
    reproduces the stored states bit-for-bit.  With ``full_paths=False`` only
    the terminal states are returned.
    """
    S, d, dt = grid.n_steps, params.d, grid.dt
    sigmaT = np.ascontiguousarray(params.sigma.T)
    if order == "second":
        X, V = initial_state
        X, V = np.array(X, dtype=np.float64), np.array(V, dtype=np.float64)
    else:
        X = np.array(initial_state, dtype=np.float64)
        V = None
    if dW.shape[-3] != S:
        raise GridMismatch("increment count does not match grid")
    batch = X.shape[:-2]
    X_hist = V_hist = None
    if full_paths:
        X_hist = np.empty(batch + (S + 1,) + X.shape[-2:])
        X_hist[..., 0, :, :] = X
        if order == "second":
            V_hist = np.empty_like(X_hist)
            V_hist[..., 0, :, :] = V
    for n in range(S):
        if driver == "interacting":
            drift = _drift_interacting(kernel, X, drift_b)
        else:
            drift = _drift_meanfield(kernel, cloud, n, X, drift_b)
        noise = dW[..., n, :, :] @ sigmaT
        if order == "second":
            X, V = _step_second(X, V, drift, noise, dt, params.gamma, params.m)
        else:
            X = _step_first(X, drift, noise, dt)
        _check_finite(X, n + 1)
        if full_paths:
            X_hist[..., n + 1, :, :] = X
            if order == "second":
                V_hist[..., n + 1, :, :] = V
    if full_paths:
        return (X_hist, V_hist) if order == "second" else X_hist
    return (X, V) if order == "second" else X


def time_marginal(bundle: PathBundle, t: float, component: str = "state"):
    """Ensemble states at the grid point nearest to t.

    ``component`` selects 'state' (positions, and velocities for second
    order), 'position', or 'velocity'.
    """
    step = bundle.grid.step_of(t)
    if component == "position":
        return bundle.X[step]
    if component == "velocity":
        if bundle.V is None:
            raise ConfigError("first-order bundle has no velocity marginal")
        return bundle.V[step]
    if bundle.order == "second":
        return np.concatenate([bundle.X[step], bundle.V[step]], axis=-1)
    return bundle.X[step]


# ---------------------------------------------------------------------------
# Vectorized ensemble runs
# ---------------------------------------------------------------------------


@dataclass
class EnsembleStats:
    """Reduced statistics over R independent realizations.

    Mismatch integrands are per-realization sums over particles of |b_i|^2
    (raw) and |sigma^T Lambda^{-1} b_i|^2 (weighted), evaluated at left grid
    endpoints.  ``raw_step_mean[n]`` averages realizations at step n;
    ``raw_totals`` holds dt * sum_n integrand per realization, and similarly
    for the weighted versions.  Optional accumulators: log Radon-Nikodym
    sums, checkpoint partial integrals, terminal states.
    """

    R: int
    n_steps: int
    dt: float
    raw_step_mean: np.ndarray
    raw_step_se: np.ndarray
    wt_step_mean: np.ndarray
    wt_step_se: np.ndarray
    raw_totals: np.ndarray
    wt_totals: np.ndarray
    log_rn: Optional[np.ndarray] = None
    checkpoints: Optional[dict] = None
    terminal_X: Optional[np.ndarray] = None
    terminal_V: Optional[np.ndarray] = None


def run_ensemble(
    params: SystemParams,
    kernel: Kernel,
    init: InitialLaw,
    grid: TimeGrid,
    N: int,
    rng: RngPolicy,
    R: int,
    *,
    order: str = "first",
    driver: str = "interacting",
    cloud: Optional[ReferenceCloud] = None,
    drift_b: Optional[Callable] = None,
    accumulate_mismatch: bool = True,
    accumulate_log_rn: bool = False,
    checkpoint_steps: tuple = (),
    collect_terminal: bool = False,
    chunk_size: Optional[int] = None,
    threads: int = 1,
) -> EnsembleStats:
    """Simulate R realizations, reducing to mismatch statistics on the fly.

    Matches the single-realization integrators state for state: realization r
    here equals ``_simulate_single(..., realization=r)``.  Work is split into
    fixed chunks of realizations; chunk results are combined in index order,
    so chunk size and thread count change speed only, never values.
    """
    if driver == "interacting" and N < 2:
        raise TooFewParticles("interacting dynamics need N >= 2")
    if accumulate_mismatch or driver == "meanfield":
        if cloud is None:
            raise ConfigError("this run needs a reference cloud")
        if cloud.grid != grid:
            raise GridMismatch("cloud grid differs from simulation grid")
    if accumulate_mismatch and N < 2:
        raise TooFewParticles("drift mismatch needs N >= 2")
    if R < 1:
        raise ConfigError("need at least one realization")
    sdim = params.d if order == "first" else 2 * params.d
    if init.dim != sdim:
        raise DimensionMismatch(f"initial law dimension {init.dim}, expected {sdim}")

    S, d, dp, dt = grid.n_steps, params.d, params.d_prime, grid.dt
    sigmaT = np.ascontiguousarray(params.sigma.T)
    Wt = None
    if accumulate_mismatch or accumulate_log_rn:
        params.require_nondegenerate()
        Wt = np.ascontiguousarray(params.weight_matrix.T)  # (d, d')

    if chunk_size is None:
        budget = 96 * 2**20
        chunk_size = max(8, min(R, int(budget / (8 * max(S * N * dp, 1)))))
    ckpts = tuple(sorted(set(int(c) for c in checkpoint_steps)))
    for c in ckpts:
        if not (0 < c <= S):
            raise ConfigError(f"checkpoint step {c} outside (0, {S}]")

    def run_chunk(r_lo, r_hi):
        B = r_hi - r_lo
        state0 = np.empty((B, N, sdim))
        dW = np.empty((B, S, N, dp))
        for b, r in enumerate(range(r_lo, r_hi)):
            state0[b], dW[b] = _draw_initials_and_increments(
                init, N, S, dp, dt, rng, DOMAIN_PATHS, r
            )
        X = np.ascontiguousarray(state0[:, :, :d])
        V = np.ascontiguousarray(state0[:, :, d:]) if order == "second" else None

        raw = np.zeros((B, S)) if accumulate_mismatch else None
        wt = np.zeros((B, S)) if accumulate_mismatch else None
        logrn = np.zeros(B) if accumulate_log_rn else None
        ck_raw = {c: None for c in ckpts}
        ck_wt = {c: None for c in ckpts}

        for n in range(S):
            dWn = dW[:, n]
            pm = cv = None
            if driver == "interacting" or accumulate_mismatch:
                pm = kernel.pair_mean(X)
            if driver == "meanfield" or accumulate_mismatch:
                cv = cloud.convolve_at(kernel, n, X)
            if accumulate_mismatch:
                bmis = pm - cv
                raw[:, n] = (bmis * bmis).sum(axis=(1, 2))
                bb = -(bmis @ Wt)
                wt[:, n] = (bb * bb).sum(axis=(1, 2))
                if accumulate_log_rn:
                    logrn += (bb * dWn).sum(axis=(1, 2)) - 0.5 * wt[:, n] * dt

            drift = pm if driver == "interacting" else cv
            if drift_b is not None:
                drift = drift + drift_b(X)
            noise = dWn @ sigmaT
            if order == "second":
                X, V = _step_second(X, V, drift, noise, dt, params.gamma, params.m)
                _check_finite(V, n + 1)
            else:
                X = _step_first(X, drift, noise, dt)
            _check_finite(X, n + 1)
            if (n + 1) in ck_raw and accumulate_mismatch:
                ck_raw[n + 1] = dt * raw[:, : n + 1].sum(axis=1)
                ck_wt[n + 1] = dt * wt[:, : n + 1].sum(axis=1)

        out = {
            "raw": raw, "wt": wt, "logrn": logrn,
            "ck_raw": ck_raw, "ck_wt": ck_wt,
            "X": X if collect_terminal else None,
            "V": V if (collect_terminal and order == "second") else None,
        }
        return out

    bounds = [(lo, min(lo + chunk_size, R)) for lo in range(0, R, chunk_size)]
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(lambda b: run_chunk(*b), bounds))
    else:
        results = [run_chunk(*b) for b in bounds]

    def cat(key):
        parts = [res[key] for res in results]
        return None if parts[0] is None else np.concatenate(parts, axis=0)

    raw = cat("raw")
    wt = cat("wt")
    if accumulate_mismatch:
        raw_mean = raw.mean(axis=0)
        wt_mean = wt.mean(axis=0)
        if R > 1:
            raw_se = raw.std(axis=0, ddof=1) / np.sqrt(R)
            wt_se = wt.std(axis=0, ddof=1) / np.sqrt(R)
        else:
            raw_se = np.zeros(S)
            wt_se = np.zeros(S)
        raw_tot = dt * raw.sum(axis=1)
        wt_tot = dt * wt.sum(axis=1)
    else:
        raw_mean = wt_mean = raw_se = wt_se = np.zeros(S)
        raw_tot = wt_tot = np.zeros(R)

    checkpoints = None
    if ckpts and accumulate_mismatch:
        checkpoints = {
            c: {
                "raw": np.concatenate([res["ck_raw"][c] for res in results]),
                "wt": np.concatenate([res["ck_wt"][c] for res in results]),
            }
            for c in ckpts
        }

    return EnsembleStats(
        R=R, n_steps=S, dt=dt,
        raw_step_mean=raw_mean, raw_step_se=raw_se,
        wt_step_mean=wt_mean, wt_step_se=wt_se,
        raw_totals=raw_tot, wt_totals=wt_tot,
        log_rn=cat("logrn"),
        checkpoints=checkpoints,
        terminal_X=cat("X"),
        terminal_V=cat("V"),
    )


# ---------------------------------------------------------------------------
# Binary cloud dump
# ---------------------------------------------------------------------------

_MAGIC = b"MFCL"


def write_cloud(path, cloud: ReferenceCloud) -> None:
    """Little-endian dump: magic, u32 version, u64 M, u32 d, u32 order,
    u64 snapshot count, f64 dt, then row-major f64 states."""
    order_code = 1 if cloud.order == "first" else 2
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQIIQd", 1, cloud.M, cloud.d, order_code,
                             cloud.grid.n_steps + 1, cloud.grid.dt))
        fh.write(np.ascontiguousarray(cloud.snapshots, dtype="<f8").tobytes())


def read_cloud(path) -> ReferenceCloud:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ConfigError(f"bad cloud file magic {magic!r}")
        version, M, d, order_code, n_snap, dt = struct.unpack("<IQIIQd", fh.read(36))
        if version != 1:
            raise ConfigError(f"unsupported cloud file version {version}")
        order = "first" if order_code == 1 else "second"
        sdim = d if order == "first" else 2 * d
        body = np.frombuffer(fh.read(), dtype="<f8")
    if body.size != n_snap * M * sdim:
        raise ConfigError("cloud file body size inconsistent with header")
    grid = TimeGrid(T=(n_snap - 1) * dt, dt=dt)
    snapshots = body.reshape(n_snap, M, sdim).astype(np.float64)
    return ReferenceCloud(M=M, order=order, d=d, grid=grid,
                          snapshots=snapshots, provenance={"source": str(path)})
