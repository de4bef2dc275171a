import numpy as np
import pytest

from sparsegs.scene import CameraView, GaussianCloud, look_at_w2c, sh_coeff_count


def make_cloud(n, seed=0, sh_degree=1, spread=0.8, z_offset=0.0):
    """Random well-conditioned cloud in a box around the origin (float64)."""
    rng = np.random.default_rng(seed)
    k = sh_coeff_count(sh_degree)
    positions = rng.uniform(-spread, spread, (n, 3))
    positions[:, 2] += z_offset
    rotations = rng.normal(0.0, 1.0, (n, 4))
    log_scales = rng.uniform(np.log(0.08), np.log(0.25), (n, 3))
    opacities = rng.uniform(-1.0, 1.5, n)
    sh = 0.3 * rng.normal(0.0, 1.0, (n, k, 3))
    return GaussianCloud(positions, rotations, log_scales, opacities, sh, sh_degree)


def make_view(width=16, height=16, distance=4.0, azimuth=0.0, elevation=0.25,
              time=0.0, target=(0.0, 0.0, 0.0), focal_scale=1.2):
    """Camera on a sphere around `target`, aimed at it, up = +z."""
    target = np.asarray(target, dtype=float)
    pos = target + distance * np.array([
        np.cos(azimuth) * np.cos(elevation),
        np.sin(azimuth) * np.cos(elevation),
        np.sin(elevation),
    ])
    f = focal_scale * width
    return CameraView(width=width, height=height, fx=f, fy=f,
                      cx=width / 2.0, cy=height / 2.0,
                      w2c=look_at_w2c(pos, target, np.array([0.0, 0.0, 1.0])),
                      time=time)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_view():
    return make_view()


@pytest.fixture(scope="session")
def shared_dataset(tmp_path_factory):
    """One synthetic dataset reused by read-only tests (32x32, 5 views)."""
    from sparsegs.dataio import synth_generate
    root = tmp_path_factory.mktemp("ds")
    synth_generate(root, seed=11, n_gaussians=35, n_views=5, width=32, height=32)
    return root
