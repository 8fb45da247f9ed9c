import math

import numpy as np
import pytest

import mflab as mf

MASTER_SEED = 20240808


@pytest.fixture(scope="session")
def rng_policy():
    return mf.RngPolicy(master_seed=MASTER_SEED)


@pytest.fixture(scope="session")
def params_1d():
    return mf.SystemParams.from_sigma(1.0, d=1)


@pytest.fixture(scope="session")
def std_init():
    return mf.GaussianIID([0.0], 1.0)


@pytest.fixture(scope="session")
def small_grid():
    return mf.TimeGrid(T=0.1, dt=1e-3)


@pytest.fixture(scope="session")
def sine_kernel():
    return mf.SineKernel(kappa=1.0, omega=1.0)


@pytest.fixture(scope="session")
def small_sine_cloud(params_1d, std_init, small_grid, sine_kernel, rng_policy):
    """A deliberately small cloud for unit tests; acceptance builds its own."""
    return mf.build_reference_cloud(params_1d, sine_kernel, std_init, small_grid,
                                    M=400, rng=rng_policy)


@pytest.fixture(scope="session")
def gaussian_snapshot_cloud(rng_policy):
    """Single-step cloud whose snapshot is one million standard Gaussians."""
    g = np.random.Generator(np.random.Philox(key=99))
    pts = g.standard_normal((1_000_000, 1))
    grid = mf.TimeGrid(T=1e-3, dt=1e-3)
    snaps = np.stack([pts, pts])
    return mf.ReferenceCloud(M=pts.shape[0], order="first", d=1, grid=grid,
                             snapshots=snaps)


def gaussian_sin_moment(x, var=1.0, mean=0.0, omega=1.0):
    """E sin(omega (x - Y)) for Y ~ N(mean, var), exact."""
    return math.exp(-0.5 * omega * omega * var) * math.sin(omega * (x - mean))
