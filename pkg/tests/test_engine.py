import math

import numpy as np
import pytest

import mflab as mf
from mflab.errors import (
    ConfigError,
    GridMismatch,
    NumericalBlowup,
    TooFewParticles,
)
from mflab.model import DOMAIN_PATHS

from conftest import gaussian_sin_moment


class TestSingleRealizations:
    def test_free_flight_is_exact(self, rng_policy):
        # dyadic step keeps every intermediate representable, so the EM
        # recursion equals x0 + v0 t bit for bit
        grid = mf.TimeGrid(T=0.25, dt=2 ** -10)
        params = mf.SystemParams(d=1, d_prime=1, sigma=np.zeros((1, 1)), gamma=0.0)
        init = mf.DeterministicPoint([1.0, 0.5])
        b = mf.simulate_interacting_2nd(params, mf.ZeroKernel(), init, grid, 2, rng_policy)
        np.testing.assert_array_equal(b.X[:, 0, 0], 1.0 + 0.5 * grid.times)
        np.testing.assert_array_equal(b.V[:, 1, 0], np.full(grid.n_steps + 1, 0.5))

    def test_pure_brownian_increments_exact(self, params_1d, std_init, small_grid, rng_policy):
        b = mf.simulate_interacting_1st(params_1d, mf.ZeroKernel(), std_init,
                                        small_grid, 3, rng_policy)
        noise = b.dW @ params_1d.sigma.T
        for n in range(small_grid.n_steps):
            np.testing.assert_array_equal(b.X[n + 1], b.X[n] + noise[n])

    def test_constant_kernel_symmetric_drift(self, rng_policy):
        # with gamma = 0 both particles feel the same drift, so the velocity
        # difference accumulates only the noise difference
        grid = mf.TimeGrid(T=0.1, dt=1e-3)
        params = mf.SystemParams.from_sigma(1.0, d=1, m=2.0, gamma=0.0)
        init = mf.GaussianIID([0.0, 0.0], 1.0)
        kern = mf.ConstantKernel([0.7])
        b = mf.simulate_interacting_2nd(params, kern, init, grid, 2, rng_policy)
        noise_diff = (b.dW[:, 0] - b.dW[:, 1]) @ params.sigma.T / params.m
        expected = b.V[0, 0] - b.V[0, 1] + noise_diff.cumsum(axis=0)
        np.testing.assert_allclose(b.V[1:, 0] - b.V[1:, 1], expected, atol=1e-13)

    def test_against_independent_reimplementation(self, rng_policy):
        """Step-by-step recursion recoded from scratch must agree bit-for-bit."""
        kappa, omega, N, T, dt = 1.0, 1.0, 4, 0.1, 1e-3
        grid = mf.TimeGrid(T=T, dt=dt)
        params = mf.SystemParams.from_sigma(1.0, d=1, m=1.0, gamma=1.0)
        init = mf.GaussianIID([0.0, 0.0], 1.0)
        kern = mf.SineKernel(kappa, omega)
        b = mf.simulate_interacting_2nd(params, kern, init, grid, N, rng_policy)

        # reconstruct initial draws and increments straight from the streams
        X = np.empty((N, 1))
        V = np.empty((N, 1))
        dW = np.empty((grid.n_steps, N, 1))
        for i in range(N):
            g = rng_policy.stream(DOMAIN_PATHS, 0, i)
            z = g.standard_normal(2)
            X[i], V[i] = z[0], z[1]
            dW[:, i, :] = math.sqrt(dt) * g.standard_normal((grid.n_steps, 1))
        np.testing.assert_array_equal(X, b.X[0])
        np.testing.assert_array_equal(dW, b.dW)

        sigmaT = params.sigma.T.copy()
        for n in range(grid.n_steps):
            s = np.sin(omega * X)
            c = np.cos(omega * X)
            inter = kappa * (s * c.sum(axis=-2, keepdims=True)
                             - c * s.sum(axis=-2, keepdims=True)) / (N - 1)
            noise = dW[n] @ sigmaT
            X_next = X + V * dt
            V = V + ((inter - params.gamma * V) * dt + noise) / params.m
            X = X_next
            np.testing.assert_array_equal(X, b.X[n + 1])
            np.testing.assert_array_equal(V, b.V[n + 1])

    def test_too_few_particles(self, params_1d, std_init, small_grid, rng_policy):
        with pytest.raises(TooFewParticles):
            mf.simulate_interacting_1st(params_1d, mf.ZeroKernel(), std_init,
                                        small_grid, 1, rng_policy)

    def test_blowup_carries_step_index(self, rng_policy):
        params = mf.SystemParams.from_sigma(1.0, d=1)
        grid = mf.TimeGrid(T=40000.0, dt=100.0)
        init = mf.GaussianIID([0.0], 1.0)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NumericalBlowup) as err:
                mf.simulate_interacting_1st(params, mf.LinearKernel(0.5), init,
                                            grid, 4, rng_policy)
        assert 0 < err.value.step <= grid.n_steps

    def test_linear_kernel_mean_is_centered(self, params_1d, rng_policy):
        # odd symmetry: E X_1(T) = 0 for a centered start
        grid = mf.TimeGrid(T=0.5, dt=5e-3)
        init = mf.GaussianIID([0.0], 1.0)
        stats = mf.run_ensemble(params_1d, mf.LinearKernel(0.5), init, grid, 2,
                                rng_policy, 10_000, accumulate_mismatch=False,
                                collect_terminal=True)
        x1 = stats.terminal_X[:, 0, 0]
        se = x1.std(ddof=1) / math.sqrt(x1.size)
        assert abs(x1.mean()) <= 3 * se


class TestDeterminism:
    def test_batch_matches_singles_bitwise(self, params_1d, std_init, sine_kernel,
                                           rng_policy, small_sine_cloud, small_grid):
        stats = mf.run_ensemble(params_1d, sine_kernel, std_init, small_grid, 4,
                                rng_policy, 3, cloud=small_sine_cloud,
                                collect_terminal=True, chunk_size=2)
        for r in range(3):
            single = mf.simulate_interacting_1st(params_1d, sine_kernel, std_init,
                                                 small_grid, 4, rng_policy,
                                                 realization=r)
            np.testing.assert_array_equal(stats.terminal_X[r], single.X[-1])

    def test_chunk_and_thread_invariance(self, params_1d, std_init, sine_kernel,
                                         rng_policy, small_sine_cloud, small_grid):
        runs = [
            mf.run_ensemble(params_1d, sine_kernel, std_init, small_grid, 4,
                            rng_policy, 10, cloud=small_sine_cloud,
                            accumulate_log_rn=True, chunk_size=cs, threads=th)
            for cs, th in ((10, 1), (3, 1), (4, 3), (1, 2))
        ]
        base = runs[0]
        for other in runs[1:]:
            np.testing.assert_array_equal(base.raw_totals, other.raw_totals)
            np.testing.assert_array_equal(base.log_rn, other.log_rn)
            np.testing.assert_array_equal(base.raw_step_mean, other.raw_step_mean)

    def test_rerun_reproduces_bundle(self, params_1d, std_init, sine_kernel,
                                     small_grid, rng_policy):
        a = mf.simulate_interacting_1st(params_1d, sine_kernel, std_init,
                                        small_grid, 4, rng_policy, realization=5)
        b = mf.simulate_interacting_1st(params_1d, sine_kernel, std_init,
                                        small_grid, 4, rng_policy, realization=5)
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.dW, b.dW)

    def test_replay_reconstructs_bit_for_bit(self, params_1d, std_init, sine_kernel,
                                             small_grid, rng_policy):
        b = mf.simulate_interacting_1st(params_1d, sine_kernel, std_init,
                                        small_grid, 5, rng_policy, realization=2)
        X = mf.replay_paths(params_1d, sine_kernel, small_grid, b.X[0], b.dW)
        np.testing.assert_array_equal(X, b.X)

    def test_replay_second_order(self, rng_policy, small_grid):
        params = mf.SystemParams.from_sigma(1.0, d=1, m=0.5, gamma=1.0)
        init = mf.GaussianIID([0.0, 0.0], 1.0)
        kern = mf.GaussBumpKernel(1.0)
        b = mf.simulate_interacting_2nd(params, kern, init, small_grid, 3, rng_policy)
        X, V = mf.replay_paths(params, kern, small_grid, (b.X[0], b.V[0]), b.dW,
                               order="second")
        np.testing.assert_array_equal(X, b.X)
        np.testing.assert_array_equal(V, b.V)


class TestReferenceCloud:
    def test_zero_kernel_cloud_is_driftless(self, params_1d, std_init, rng_policy):
        grid = mf.TimeGrid(T=0.5, dt=5e-3)
        cloud = mf.build_reference_cloud(params_1d, mf.ZeroKernel(), std_init,
                                         grid, M=2000, rng=rng_policy)
        x = cloud.positions(grid.n_steps)[:, 0]
        se = x.std(ddof=1) / math.sqrt(x.size)
        assert abs(x.mean()) <= 3 * se

    def test_constant_kernel_cloud_translates(self, params_1d, std_init, rng_policy):
        grid = mf.TimeGrid(T=0.5, dt=5e-3)
        c = 0.8
        cloud = mf.build_reference_cloud(params_1d, mf.ConstantKernel([c]),
                                         std_init, grid, M=2000, rng=rng_policy)
        x = cloud.positions(grid.n_steps)[:, 0]
        se = x.std(ddof=1) / math.sqrt(x.size)
        assert abs(x.mean() - c * grid.T) <= 3 * se

    def test_linear_cloud_matches_meanfield_ode(self, params_1d, std_init, rng_policy):
        grid = mf.TimeGrid(T=1.0, dt=2e-3)
        cloud = mf.build_reference_cloud(params_1d, mf.LinearKernel(0.5), std_init,
                                         grid, M=10_000, rng=rng_policy)
        for t in (0.25, 0.5, 1.0):
            step = grid.step_of(t)
            x = cloud.positions(step)[:, 0]
            want = mf.meanfield_variance_closed_form(0.5, 1.0, 1.0, t)
            var = x.var(ddof=1)
            se = var * math.sqrt(2.0 / (x.size - 1))
            assert abs(var - want) <= 3 * se

    def test_minimum_size(self, params_1d, std_init, small_grid, rng_policy):
        with pytest.raises(ConfigError):
            mf.build_reference_cloud(params_1d, mf.ZeroKernel(), std_init,
                                     small_grid, M=50, rng=rng_policy)

    def test_snapshot_immutable(self, small_sine_cloud):
        with pytest.raises(ValueError):
            small_sine_cloud.snapshots[0, 0, 0] = 1.0


class TestMeanfieldDrift:
    def test_zero_and_constant(self, small_sine_cloud, params_1d):
        x = np.array([0.3])
        assert mf.meanfield_drift(small_sine_cloud, mf.ZeroKernel(), 0, x) == 0.0
        got = mf.meanfield_drift(small_sine_cloud, mf.ConstantKernel([0.7]), 3, x)
        assert got[0] == 0.7

    def test_sine_against_gaussian_moment(self, gaussian_snapshot_cloud):
        x = np.array([math.pi / 2])
        got = mf.meanfield_drift(gaussian_snapshot_cloud, mf.SineKernel(1.0, 1.0), 0, x)
        pts = gaussian_snapshot_cloud.positions(0)[:, 0]
        samples = np.sin(x[0] - pts)
        se = samples.std(ddof=1) / math.sqrt(pts.size)
        assert abs(got[0] - gaussian_sin_moment(math.pi / 2)) <= 3 * se

    def test_sine_factorization_matches_direct_sum(self, small_sine_cloud):
        kern = mf.SineKernel(1.2, 0.9)
        pts = small_sine_cloud.positions(5)
        x = np.array([[0.4], [-1.1], [2.5]])
        got = mf.meanfield_drift(small_sine_cloud, kern, 5, x)
        direct = np.stack([kern.evaluate(xi[None, :] - pts).mean(axis=0) for xi in x])
        np.testing.assert_allclose(got, direct, atol=1e-12)

    def test_dimension_mismatch(self, small_sine_cloud):
        with pytest.raises(mf.DimensionMismatch):
            mf.meanfield_drift(small_sine_cloud, mf.ZeroKernel(), 0, np.zeros(2))


class TestCoupling:
    def test_shared_noise_bit_equal(self, params_1d, std_init, sine_kernel,
                                    small_sine_cloud, small_grid, rng_policy):
        a = mf.simulate_interacting_1st(params_1d, sine_kernel, std_init,
                                        small_grid, 4, rng_policy, realization=1)
        b = mf.simulate_meanfield_driven(params_1d, sine_kernel, small_sine_cloud,
                                         std_init, small_grid, 4, rng_policy,
                                         realization=1)
        np.testing.assert_array_equal(a.dW, b.dW)
        np.testing.assert_array_equal(a.X[0], b.X[0])

    def test_trivial_kernels_give_identical_paths(self, params_1d, std_init,
                                                  small_grid, rng_policy):
        for kern in (mf.ZeroKernel(), mf.ConstantKernel([0.4])):
            cloud = mf.build_reference_cloud(params_1d, kern, std_init, small_grid,
                                             M=150, rng=rng_policy, refine_iters=0)
            a = mf.simulate_interacting_1st(params_1d, kern, std_init, small_grid,
                                            3, rng_policy)
            b = mf.simulate_meanfield_driven(params_1d, kern, cloud, std_init,
                                             small_grid, 3, rng_policy)
            np.testing.assert_array_equal(a.X, b.X)

    def test_sine_paths_diverge_from_zero(self, params_1d, std_init, sine_kernel,
                                          small_sine_cloud, small_grid, rng_policy):
        a = mf.simulate_interacting_1st(params_1d, sine_kernel, std_init,
                                        small_grid, 8, rng_policy)
        b = mf.simulate_meanfield_driven(params_1d, sine_kernel, small_sine_cloud,
                                         std_init, small_grid, 8, rng_policy)
        dev = np.abs(a.X - b.X).max(axis=(1, 2))
        assert dev[0] == 0.0
        half = small_grid.n_steps // 2
        assert 0.0 < dev[half] < dev[-1]


class TestSolutionMap:
    def test_zero_noise_free_flight(self, rng_policy):
        grid = mf.TimeGrid(T=0.25, dt=2 ** -10)
        params = mf.SystemParams(d=1, d_prime=1, sigma=np.zeros((1, 1)), gamma=0.0)
        init = mf.DeterministicPoint([1.0, 0.5])
        cloud = mf.build_reference_cloud(params, mf.ZeroKernel(), init, grid,
                                         M=100, rng=rng_policy, refine_iters=0,
                                         order="second")
        theta = mf.NoisePath(grid=grid, increments=np.zeros((grid.n_steps, 2, 1)))
        rec = mf.solution_map_phi(theta, params, mf.ZeroKernel(), cloud,
                                  (np.full((2, 1), 1.0), np.full((2, 1), 0.5)),
                                  order="second")
        np.testing.assert_array_equal(rec.X[:, 0, 0], 1.0 + 0.5 * grid.times)

    def test_theta2_roundtrip_bit_for_bit(self, params_1d, std_init, sine_kernel,
                                          small_sine_cloud, small_grid, rng_policy):
        b = mf.simulate_meanfield_driven(params_1d, sine_kernel, small_sine_cloud,
                                         std_init, small_grid, 4, rng_policy)
        rec = mf.solution_map_phi(mf.extract_noise_theta2(b), params_1d, sine_kernel,
                                  small_sine_cloud, b.X[0])
        np.testing.assert_array_equal(rec.X, b.X)

    def test_theta1_reconstructs_interacting(self, params_1d, std_init, sine_kernel,
                                             small_sine_cloud, small_grid, rng_policy):
        b = mf.simulate_interacting_1st(params_1d, sine_kernel, std_init, small_grid,
                                        4, rng_policy)
        theta1 = mf.extract_noise_theta1(b, small_sine_cloud, sine_kernel)
        rec = mf.solution_map_phi(theta1, params_1d, sine_kernel, small_sine_cloud,
                                  b.X[0])
        assert np.abs(rec.X - b.X).max() <= 1e-9

    def test_second_order_theta1_roundtrip(self, rng_policy, small_grid):
        params = mf.SystemParams.from_sigma(1.0, d=1, m=0.7, gamma=1.0)
        init = mf.GaussianIID([0.0, 0.0], 1.0)
        kern = mf.SineKernel(1.0, 1.0)
        cloud = mf.build_reference_cloud(params, kern, init, small_grid, M=200,
                                         rng=rng_policy, order="second")
        b = mf.simulate_interacting_2nd(params, kern, init, small_grid, 4, rng_policy)
        theta1 = mf.extract_noise_theta1(b, cloud, kern)
        rec = mf.solution_map_phi(theta1, params, kern, cloud, (b.X[0], b.V[0]),
                                  order="second")
        assert np.abs(rec.X - b.X).max() <= 1e-9
        assert np.abs(rec.V - b.V).max() <= 1e-9

    def test_noise_path_invariants(self, params_1d, std_init, small_grid, rng_policy):
        b = mf.simulate_interacting_1st(params_1d, mf.ZeroKernel(), std_init,
                                        small_grid, 3, rng_policy)
        theta = mf.extract_noise_theta2(b)
        np.testing.assert_array_equal(theta.values[0], 0.0)
        np.testing.assert_allclose(np.diff(theta.values, axis=0), theta.increments,
                                   atol=1e-12)

    def test_grid_mismatch(self, params_1d, sine_kernel, small_sine_cloud):
        other = mf.TimeGrid(T=0.2, dt=1e-3)
        theta = mf.NoisePath(grid=other, increments=np.zeros((other.n_steps, 2, 1)))
        with pytest.raises(GridMismatch):
            mf.solution_map_phi(theta, params_1d, sine_kernel, small_sine_cloud,
                                np.zeros((2, 1)))


class TestTimeMarginal:
    def test_endpoints_and_middle(self, params_1d, std_init, rng_policy):
        grid = mf.TimeGrid(T=1.0, dt=1e-2)
        b = mf.simulate_interacting_1st(params_1d, mf.ZeroKernel(), std_init,
                                        grid, 3, rng_policy)
        np.testing.assert_array_equal(mf.time_marginal(b, 0.0), b.X[0])
        np.testing.assert_array_equal(mf.time_marginal(b, 1.0), b.X[-1])
        np.testing.assert_array_equal(mf.time_marginal(b, 0.5), b.X[50])

    def test_velocity_component(self, rng_policy, small_grid):
        params = mf.SystemParams.from_sigma(1.0, d=1)
        init = mf.GaussianIID([0.0, 0.0], 1.0)
        b = mf.simulate_interacting_2nd(params, mf.ZeroKernel(), init, small_grid,
                                        2, rng_policy)
        np.testing.assert_array_equal(mf.time_marginal(b, small_grid.T, "velocity"),
                                      b.V[-1])
        with pytest.raises(ConfigError):
            mf.time_marginal(b, 2 * small_grid.T)


class TestStatisticalSanity:
    def test_mass_scaling_of_velocity_variance(self, rng_policy):
        # zero kernel, gamma = 0: V(T) = V0 + sigma W(T)/m, an exact Ito isometry
        grid = mf.TimeGrid(T=0.5, dt=5e-3)
        m = 2.5
        params = mf.SystemParams.from_sigma(1.0, d=1, m=m, gamma=0.0)
        init = mf.DeterministicPoint([0.0, 0.0])
        stats = mf.run_ensemble(params, mf.ZeroKernel(), init, grid, 2, rng_policy,
                                4000, order="second", accumulate_mismatch=False,
                                collect_terminal=True)
        v = stats.terminal_V[:, 0, 0]
        want = grid.T / m ** 2
        var = v.var(ddof=1)
        se = var * math.sqrt(2.0 / (v.size - 1))
        assert abs(var - want) <= 3 * se

    def test_weak_order_ladder(self, rng_policy):
        """EM variance error decreases monotonically on a common-noise dt ladder.

        Starting the difference mode at its continuous stationary value makes
        the residual EM bias purely the positive stationary offset, which is
        monotone in dt; Brownian-consistent coarsening keeps the comparison
        common-noise so Monte Carlo noise cannot flip the ordering.
        """
        a, lam, N, T, R = 2.0, 1.0, 8, 1.0, 4000
        params = mf.SystemParams.from_sigma(1.0, d=1)
        kern = mf.LinearKernel(a)
        rate = a * N / (N - 1)
        s0 = lam * (N - 1) / (2 * a * N)  # u-mode stationary start
        g = np.random.Generator(np.random.Philox(key=321))
        n_fine = 400  # dt = 2.5e-3
        X0 = math.sqrt(s0) * g.standard_normal((R, N, 1))
        dW_fine = math.sqrt(T / n_fine) * g.standard_normal((R, n_fine, N, 1))

        oracle = mf.propagate_interacting(
            a, params, N,
            mf.ExchangeableGaussian(N=N, mean=[0.0], s=[[s0]], c=[[0.0]]),
            mf.TimeGrid(T=T, dt=0.01),
        )
        target = oracle.s[-1, 0, 0]

        errors = []
        for factor in (4, 2, 1):  # dt = 1e-2, 5e-3, 2.5e-3
            n_steps = n_fine // factor
            dW = dW_fine.reshape(R, n_steps, factor, N, 1).sum(axis=2)
            grid = mf.TimeGrid(T=T, dt=T / n_steps)
            XT = mf.replay_paths(params, kern, grid, X0, dW, full_paths=False)
            var = (XT[:, :, 0] ** 2).mean()
            errors.append(abs(var - target))
        assert errors[0] > errors[1] > errors[2]


class TestCloudDump:
    def test_roundtrip_bit_exact(self, small_sine_cloud, tmp_path):
        path = tmp_path / "cloud.mfcl"
        mf.write_cloud(path, small_sine_cloud)
        back = mf.read_cloud(path)
        assert back.M == small_sine_cloud.M
        assert back.order == small_sine_cloud.order
        assert back.grid == small_sine_cloud.grid
        np.testing.assert_array_equal(back.snapshots, small_sine_cloud.snapshots)

    def test_second_order_roundtrip(self, rng_policy, tmp_path):
        params = mf.SystemParams.from_sigma(1.0, d=1, m=1.0, gamma=1.0)
        init = mf.GaussianIID([0.0, 0.0], 1.0)
        grid = mf.TimeGrid(T=0.02, dt=1e-3)
        cloud = mf.build_reference_cloud(params, mf.ZeroKernel(), init, grid,
                                         M=120, rng=rng_policy, order="second")
        path = tmp_path / "cloud2.mfcl"
        mf.write_cloud(path, cloud)
        back = mf.read_cloud(path)
        np.testing.assert_array_equal(back.snapshots, cloud.snapshots)
        assert back.order == "second"

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.mfcl"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ConfigError):
            mf.read_cloud(path)
