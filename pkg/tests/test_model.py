import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mflab as mf
from mflab.errors import ConfigError, DegenerateDiffusion, DimensionMismatch, UnboundedKernel

BOUNDED_KERNELS = [
    (mf.ZeroKernel(), 1),
    (mf.ZeroKernel(), 3),
    (mf.ConstantKernel([0.3, -0.4]), 2),
    (mf.SineKernel(kappa=1.7, omega=0.8), 1),
    (mf.SineKernel(kappa=0.5, omega=2.0), 3),
    (mf.GaussBumpKernel(kappa=2.0), 1),
    (mf.GaussBumpKernel(kappa=1.0), 2),
]


class TestKernelEval:
    def test_zero(self):
        assert mf.kernel_eval(mf.ZeroKernel(), [3.7]) == np.array([0.0])

    def test_sine_at_origin(self):
        assert mf.kernel_eval(mf.SineKernel(1.0, 1.0), [0.0]) == np.array([0.0])

    def test_gauss_bump_formula(self):
        got = mf.kernel_eval(mf.GaussBumpKernel(1.0), [1.0])
        assert got[0] == pytest.approx(math.exp(-1.0), abs=1e-15)

    def test_output_dimension_matches_input(self):
        for kern, d in BOUNDED_KERNELS:
            x = np.linspace(-1, 1, d)
            assert mf.kernel_eval(kern, x).shape == (d,)

    def test_constant_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            mf.kernel_eval(mf.ConstantKernel([1.0, 2.0]), [1.0])

    def test_linear_is_minus_a_x(self):
        got = mf.kernel_eval(mf.LinearKernel(0.5), [2.0, -4.0])
        np.testing.assert_array_equal(got, [-1.0, 2.0])


class TestSupNorm:
    def test_zero(self):
        assert mf.kernel_sup_norm(mf.ZeroKernel(), 1) == 0.0

    def test_sine_amplitude(self):
        assert mf.kernel_sup_norm(mf.SineKernel(2.0, 3.0), 1) == 2.0

    def test_sine_scales_with_sqrt_d(self):
        assert mf.kernel_sup_norm(mf.SineKernel(1.0, 1.0), 4) == pytest.approx(2.0)

    def test_constant(self):
        assert mf.kernel_sup_norm(mf.ConstantKernel([3.0, 4.0]), 2) == pytest.approx(5.0)

    def test_gauss_bump_against_grid_search(self):
        # independent 1-d maximization of r exp(-r^2)
        r = np.linspace(0.0, 5.0, 400_001)
        grid_max = (r * np.exp(-(r ** 2))).max()
        got = mf.kernel_sup_norm(mf.GaussBumpKernel(1.0), 1)
        assert got == pytest.approx(1.0 / math.sqrt(2.0 * math.e), rel=1e-14)
        assert got == pytest.approx(grid_max, rel=1e-9)

    def test_linear_rejected(self):
        with pytest.raises(UnboundedKernel):
            mf.kernel_sup_norm(mf.LinearKernel(0.5), 1)

    def test_bound_holds_on_bulk_random_inputs(self):
        g = np.random.Generator(np.random.Philox(key=5))
        for kern, d in BOUNDED_KERNELS:
            x = g.normal(0.0, 4.0, size=(10_000, d))
            norms = np.linalg.norm(kern.evaluate(x), axis=-1)
            assert norms.max() <= kern.sup_norm(d) + 1e-12

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=4))
    @settings(max_examples=200, deadline=None)
    def test_bound_holds_property(self, xs):
        x = np.array(xs)
        d = x.size
        for kern in (mf.SineKernel(1.3, 0.9), mf.GaussBumpKernel(1.1)):
            val = np.linalg.norm(kern.evaluate(x))
            assert val <= kern.sup_norm(d) + 1e-12


class TestLambdaMin:
    def test_identity(self):
        assert mf.lambda_min_of(np.eye(2)) == pytest.approx(1.0)

    def test_diagonal(self):
        assert mf.lambda_min_of(np.diag([1.0, 2.0])) == pytest.approx(1.0)

    def test_shear_matrix_characteristic_root(self):
        # sigma sigma^T = [[2,1],[1,1]], smallest root of x^2 - 3x + 1
        want = (3.0 - math.sqrt(5.0)) / 2.0
        got = mf.lambda_min_of(np.array([[1.0, 1.0], [0.0, 1.0]]))
        assert got == pytest.approx(want, rel=1e-12)

    def test_degenerate_rejected(self):
        with pytest.raises(DegenerateDiffusion):
            mf.lambda_min_of(np.zeros((2, 2)))

    def test_orthogonal_right_factor_invariance(self):
        g = np.random.Generator(np.random.Philox(key=11))
        for _ in range(20):
            sigma = g.normal(size=(3, 3)) + 3 * np.eye(3)
            q, _ = np.linalg.qr(g.normal(size=(3, 3)))
            a = mf.lambda_min_of(sigma)
            b = mf.lambda_min_of(sigma @ q)
            assert a == pytest.approx(b, rel=1e-9)


class TestSystemParams:
    def test_lambda_recomputed_and_symmetric(self):
        sigma = np.array([[1.0, 1.0], [0.0, 1.0]])
        p = mf.SystemParams(d=2, d_prime=2, sigma=sigma)
        np.testing.assert_allclose(p.lambda_mat, sigma @ sigma.T)
        np.testing.assert_array_equal(p.lambda_mat, p.lambda_mat.T)

    def test_scalar_and_diagonal_builders(self):
        p = mf.SystemParams.from_sigma(2.0, d=3)
        np.testing.assert_allclose(p.sigma, 2.0 * np.eye(3))
        q = mf.SystemParams.from_sigma([1.0, 3.0])
        assert q.lambda_min == pytest.approx(1.0)

    def test_mass_and_damping_validation(self):
        with pytest.raises(ConfigError):
            mf.SystemParams.from_sigma(1.0, d=1, m=0.0)
        with pytest.raises(ConfigError):
            mf.SystemParams.from_sigma(1.0, d=1, gamma=-0.1)

    def test_degenerate_allowed_until_kl_ops(self):
        p = mf.SystemParams(d=1, d_prime=1, sigma=np.zeros((1, 1)))
        assert p.lambda_min == 0.0
        with pytest.raises(DegenerateDiffusion):
            p.require_nondegenerate()

    def test_weight_matrix(self):
        p = mf.SystemParams.from_sigma(2.0, d=2)
        np.testing.assert_allclose(p.weight_matrix, np.eye(2) / 2.0)

    def test_immutability(self):
        p = mf.SystemParams.from_sigma(1.0, d=1)
        with pytest.raises(ValueError):
            p.sigma[0, 0] = 5.0


class TestTimeGrid:
    def test_consistency(self):
        grid = mf.TimeGrid(T=1.0, dt=1e-3)
        assert grid.n_steps == 1000
        assert abs(grid.n_steps * grid.dt - grid.T) <= 1e-12 * grid.T
        assert grid.times.shape == (1001,)

    def test_uneven_step_rejected(self):
        with pytest.raises(ConfigError):
            mf.TimeGrid(T=1.0, dt=3e-4)

    def test_at_least_one_step(self):
        with pytest.raises(ConfigError):
            mf.TimeGrid(T=1e-6, dt=1e-3)

    def test_step_of(self):
        grid = mf.TimeGrid(T=1.0, dt=1e-2)
        assert grid.step_of(0.0) == 0
        assert grid.step_of(1.0) == 100
        assert grid.step_of(0.5) == 50
        with pytest.raises(ConfigError):
            grid.step_of(1.5)


class TestInitialLaws:
    def test_gaussian_moments(self, rng_policy):
        law = mf.GaussianIID([1.0, -1.0], [[2.0, 0.5], [0.5, 1.0]])
        g = rng_policy.stream(3, 0, 0)
        draws = np.stack([law.sample(g) for _ in range(20_000)])
        np.testing.assert_allclose(draws.mean(axis=0), [1.0, -1.0], atol=0.05)
        np.testing.assert_allclose(np.cov(draws.T), [[2.0, 0.5], [0.5, 1.0]], atol=0.08)

    def test_gaussian_requires_pd(self):
        with pytest.raises(ConfigError):
            mf.GaussianIID([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])

    def test_deterministic_point(self, rng_policy):
        law = mf.DeterministicPoint([2.0, 3.0])
        np.testing.assert_array_equal(law.sample(rng_policy.stream(3, 0, 1)), [2.0, 3.0])

    def test_empirical_from_file(self, tmp_path, rng_policy):
        path = tmp_path / "points.txt"
        pts = np.array([[0.0], [1.0], [2.0]])
        np.savetxt(path, pts)
        law = mf.EmpiricalInit(str(path))
        g = rng_policy.stream(3, 1, 0)
        draws = {float(law.sample(g)[0]) for _ in range(200)}
        assert draws <= {0.0, 1.0, 2.0}
        assert len(draws) == 3


class TestRngPolicy:
    def test_keyed_reproducibility(self):
        pol = mf.RngPolicy(master_seed=123)
        a = pol.stream(0, 5, 7).standard_normal(16)
        b = pol.stream(0, 5, 7).standard_normal(16)
        np.testing.assert_array_equal(a, b)

    def test_distinct_keys_decorrelate(self):
        pol = mf.RngPolicy(master_seed=123)
        base = pol.stream(0, 5, 7).standard_normal(16)
        for key in ((1, 5, 7), (0, 6, 7), (0, 5, 8)):
            other = pol.stream(*key).standard_normal(16)
            assert not np.array_equal(base, other)

    def test_chunking_invariance(self):
        pol = mf.RngPolicy(master_seed=9)
        g1 = pol.stream(0, 0, 0)
        whole = g1.standard_normal(10)
        g2 = pol.stream(0, 0, 0)
        parts = np.concatenate([g2.standard_normal(3), g2.standard_normal(7)])
        np.testing.assert_array_equal(whole, parts)

    def test_seed_bounds(self):
        with pytest.raises(ConfigError):
            mf.RngPolicy(master_seed=1 << 64)
        with pytest.raises(ConfigError):
            mf.RngPolicy(master_seed=7).stream(0, 1 << 32, 0)
