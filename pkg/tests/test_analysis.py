import numpy as np
import pytest

import oracles
from foveastack import analysis, optics
from foveastack.analysis import CoverageMap, MtfCurve
from foveastack.errors import VignettedError


def test_spot_statistics_hand_example():
    # one wavelength, three rays on a line: centroid 0, deviations 1,0,1
    pts = np.array([[[-1.0, 0.0], [0.0, 0.0], [1.0, 0.0]]])
    alive = np.ones((1, 3), bool)
    assert analysis.spot_statistics(pts, alive) == pytest.approx(
        2.0 / 3.0 * 1000.0)


def test_spot_statistics_excludes_dead_rays():
    pts = np.array([[[-1.0, 0.0], [0.0, 0.0], [50.0, 50.0]]])
    alive = np.array([[True, True, False]])
    assert analysis.spot_statistics(pts, alive) == pytest.approx(500.0)
    with pytest.raises(VignettedError):
        analysis.spot_statistics(pts, np.zeros((1, 3), bool))


def test_spot_statistics_per_wavelength_average():
    # wavelength 0 spot twice the size of wavelength 1, common centroid
    p0 = [[-2.0, 0.0], [2.0, 0.0]]
    p1 = [[-1.0, 0.0], [1.0, 0.0]]
    pts = np.array([p0, p1])
    alive = np.ones((2, 2), bool)
    assert analysis.spot_statistics(pts, alive) == pytest.approx(1500.0)


def test_dense_rings_inverts_hexapolar_count():
    for n in (19, 127, 1000, 20000):
        r = analysis._dense_rings(n)
        assert 1 + 3 * r * (r + 1) >= n
        assert r == 1 or 1 + 3 * (r - 1) * r < n


def test_psf_render_normalized_and_centered(system):
    P = np.array([0.0, 0.0, system.object_z])
    psf = analysis.psf_render(system, None, P, rays=5_000, support=33)
    assert psf.shape == (3, 33, 33)
    for c in range(3):
        assert psf[c].sum() == pytest.approx(1.0)
    # on-axis PSF: luminance centroid lands at the grid center
    luma = np.tensordot(analysis.LUMA_WEIGHTS_BGR, psf, axes=(0, 0))
    ys, xs = np.mgrid[0:33, 0:33]
    cy = (luma * ys).sum() / luma.sum()
    cx = (luma * xs).sum() / luma.sum()
    assert cy == pytest.approx(16.0, abs=1.0)
    assert cx == pytest.approx(16.0, abs=1.0)


def test_mtf_of_gaussian_psf_matches_closed_form():
    """Histogram of a planted Gaussian PSF against the analytic MTF."""
    support, pitch_um = 129, 2.0
    sigma_mm = 0.004
    half = support * pitch_um * 1e-3 / 2
    x = (np.arange(support) + 0.5) * pitch_um * 1e-3 - half
    X, Y = np.meshgrid(x, x)
    g = np.exp(-(X ** 2 + Y ** 2) / (2 * sigma_mm ** 2))
    psf = np.stack([g, g, g])
    psf /= psf.sum(axis=(1, 2), keepdims=True)
    curve = analysis.mtf_from_psf(psf, pitch_um)
    want = oracles.gaussian_mtf(curve.frequencies, sigma_mm)
    keep = want > 0.05   # skip the aliased tail
    assert np.abs(curve.mean[keep] - want[keep]).max() < 0.01
    assert np.abs(curve.sagittal[keep] - curve.tangential[keep]).max() < 1e-9


def test_mtf50_interpolation():
    f = np.array([0.0, 10.0, 20.0, 30.0])
    m = np.array([1.0, 0.8, 0.4, 0.2])
    curve = MtfCurve(f, m, m)
    f50, sat = analysis.mtf50(curve)
    assert not sat
    # linear crossing between 10 and 20 lp/mm at m = 0.5
    assert f50 == pytest.approx(10.0 + 0.3 / 0.4 * 10.0)


def test_mtf50_saturated():
    f = np.array([0.0, 10.0, 20.0])
    m = np.array([1.0, 0.9, 0.8])
    f50, sat = analysis.mtf50(MtfCurve(f, m, m))
    assert sat
    assert f50 == 20.0


def test_coverage_map_threshold_and_extent():
    rho = np.array([0.1, 0.2, 0.3])
    theta = np.array([-1.0, 0.0, 1.0])
    grid = np.array([[40.0, 50.0, 40.0],
                     [10.0, 35.0, 10.0],
                     [5.0, 5.0, 5.0]])
    cmap = CoverageMap(rho, theta, grid, threshold=30.0)
    assert cmap.covered.sum() == 4
    (r0, r1), (t0, t1), area = cmap.region_extent()
    assert (r0, r1) == (0.1, 0.2)
    assert (t0, t1) == (-1.0, 1.0)
    assert area == pytest.approx(4 * 0.1 * 1.0)


def test_coverage_map_empty_extent():
    cmap = CoverageMap(np.array([0.1]), np.array([0.0]),
                       np.array([[1.0]]), threshold=30.0)
    assert cmap.region_extent() is None


def test_coverage_csv_round_trip(tmp_path):
    rho = np.array([0.1, 0.5])
    theta = np.array([0.0, 1.5])
    grid = np.array([[12.0, 34.0], [56.0, 78.0]])
    cmap = CoverageMap(rho, theta, grid, threshold=30.0)
    path = tmp_path / "coverage.csv"
    cmap.to_csv(path)
    rows = path.read_text().strip().splitlines()
    assert rows[0] == "rho,theta,mtf50_lp_mm"
    assert len(rows) == 5
    assert rows[1].split(",") == ["0.1", "0", "12"]


def test_sensor_square_mask_geometry():
    theta = np.array([0.0, np.pi / 4])
    rho = np.array([0.5, 0.9, 1.0])
    mask = analysis.sensor_square_mask(rho, theta)
    # along the axis the square edge sits at rho = 1/sqrt(2)
    assert mask[:, 0].tolist() == [True, False, False]
    # along the diagonal the corner reaches rho = 1
    assert mask[:, 1].tolist() == [True, True, True]


def _uniform_coverage(rho, theta, value):
    return CoverageMap(rho, theta, np.full((len(rho), len(theta)), value),
                       threshold=30.0)


def test_images_needed_greedy_cover():
    rho = np.linspace(0.02, 1.0, 5)
    theta = np.linspace(-np.pi, np.pi, 9)
    # one pattern covering everything -> a single placement suffices
    full = _uniform_coverage(rho, theta, 100.0)
    out = analysis.images_needed({0.0: full}, threshold=30.0)
    assert out["count"] == 1
    assert out["uncovered_cells"] == 0
    # a pattern covering one theta column needs one placement per column
    grid = np.zeros((5, 9))
    grid[:, 0] = 100.0
    col = CoverageMap(rho, theta, grid, threshold=30.0)
    out = analysis.images_needed({0.5: col}, threshold=30.0, theta_steps=9)
    assert out["count"] == 8   # endpoints -pi and pi are the same cell set
    assert out["uncovered_cells"] <= 5


def test_images_needed_zero_threshold():
    rho = np.linspace(0.02, 1.0, 3)
    theta = np.linspace(-np.pi, np.pi, 5)
    out = analysis.images_needed({0.0: _uniform_coverage(rho, theta, 0.0)},
                                 threshold=0.0)
    assert out["count"] == 1


def test_rms_spot_vignetted_field(system):
    # far outside the field of view the lens aperture kills the fan
    P = np.array([1500.0, 0.0, system.object_z])
    with pytest.raises(VignettedError):
        analysis.rms_spot(system, P)
