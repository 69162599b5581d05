"""Spot, PSF, MTF and fovea-coverage analytics over the field of view."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import optics
from .errors import VignettedError
from .optics import OpticalSystem
from .zernike import ZernikeExpansion

# Rec. 709 relative-luminance weights keyed by design wavelength role:
# channel order follows system.wavelengths = (blue, green, red)
LUMA_WEIGHTS_BGR = (0.0722, 0.7152, 0.2126)

MIN_ALIVE_FRACTION = 0.5


@dataclass
class SpotGridStack:
    """Per-point, per-pattern spot sizes over an HxW field grid."""

    r: np.ndarray             # (H, W, N) micrometers
    field_points: np.ndarray  # (H, W, 3) object-space points
    depth: float

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float)

    @property
    def grid_shape(self):
        return self.r.shape[:2]

    @property
    def n_patterns(self):
        return self.r.shape[2]

    @property
    def r_min(self) -> np.ndarray:
        return self.r.min(axis=2)

    @property
    def n_star(self) -> np.ndarray:
        # argmin breaks ties by lowest pattern index
        return self.r.argmin(axis=2)


@dataclass
class MtfCurve:
    frequencies: np.ndarray   # lp/mm
    sagittal: np.ndarray
    tangential: np.ndarray
    field_angle_deg: float = 0.0
    rho: float = 0.0

    @property
    def mean(self) -> np.ndarray:
        return 0.5 * (self.sagittal + self.tangential)

    @property
    def nyquist(self) -> float:
        return float(self.frequencies[-1])


def spot_statistics(points: np.ndarray, alive: np.ndarray) -> float:
    """Spot size from traced sensor points, (L, N, 2) mm and (L, N) mask.

    Mean radial deviation from the all-wavelength centroid, averaged per
    wavelength and then across wavelengths, in micrometers.
    """
    if not alive.any():
        raise VignettedError("no surviving rays")
    centroid = points[alive].mean(axis=0)
    per_lambda = []
    for lam in range(points.shape[0]):
        m = alive[lam]
        if not m.any():
            continue
        dev = np.linalg.norm(points[lam][m] - centroid, axis=1)
        per_lambda.append(dev.mean())
    return float(np.mean(per_lambda)) * 1000.0


def rms_spot(system: OpticalSystem, P, expansion: ZernikeExpansion | None = None,
             rings: int = 6) -> float:
    """Spot size (um) of one object point through the system."""
    pts, alive = optics.trace_field_point(system, P, expansion, rings=rings)
    if alive.mean() < MIN_ALIVE_FRACTION:
        raise VignettedError(
            f"only {alive.mean():.0%} of rays survive at {np.asarray(P)[:2]}")
    return spot_statistics(pts, alive)


def _dense_rings(n_rays: int) -> int:
    # hexapolar count is 1 + 3 r (r + 1); invert for the requested total
    r = int(math.ceil((-1 + math.sqrt(1 + 4 * (n_rays - 1) / 3)) / 2))
    return max(r, 1)


def psf_render(system: OpticalSystem, expansion: ZernikeExpansion | None, P,
               rays: int = 100_000, pixel_pitch_um: float | None = None,
               support: int = 64, orientation: float = 0.0) -> np.ndarray:
    """Geometric PSF as per-wavelength histograms of traced rays.

    Returns (3, support, support), unit sum per channel, centered on the
    all-wavelength spot centroid. orientation rotates sensor coordinates
    so the +x axis of the histogram is the radial (tangential-MTF) axis.
    """
    if pixel_pitch_um is None:
        pixel_pitch_um = system.sensor.pixel_pitch_um
    rings = _dense_rings(rays)
    pts, alive = optics.trace_field_point(system, P, expansion, rings=rings)
    if not alive.any():
        raise VignettedError("all rays dead; cannot render PSF")
    centroid = pts[alive].mean(axis=0)
    rel = pts - centroid
    if orientation != 0.0:
        c, s = math.cos(orientation), math.sin(orientation)
        rel = np.stack([c * rel[..., 0] + s * rel[..., 1],
                        -s * rel[..., 0] + c * rel[..., 1]], axis=-1)
    half = support * pixel_pitch_um * 1e-3 / 2
    edges = np.linspace(-half, half, support + 1)
    out = np.zeros((pts.shape[0], support, support))
    for lam in range(pts.shape[0]):
        m = alive[lam]
        if not m.any():
            continue
        h, _, _ = np.histogram2d(rel[lam][m, 1], rel[lam][m, 0],
                                 bins=(edges, edges))
        total = h.sum()
        if total > 0:
            out[lam] = h / total
    return out


def mtf_from_psf(psf: np.ndarray, pixel_pitch_um: float,
                 field_angle_deg: float = 0.0, rho: float = 0.0) -> MtfCurve:
    """Luminance-weighted MTF from a (3, S, S) PSF.

    Tangential/sagittal taken as the line-spread projections onto the
    histogram's x (radial) and y axes.
    """
    w = np.asarray(LUMA_WEIGHTS_BGR)
    luma = np.tensordot(w, psf, axes=(0, 0))
    total = luma.sum()
    if total <= 0:
        raise VignettedError("empty PSF")
    luma = luma / total
    lsf_t = luma.sum(axis=0)   # projection onto x: tangential
    lsf_s = luma.sum(axis=1)   # projection onto y: sagittal
    pitch_mm = pixel_pitch_um * 1e-3
    freqs = np.fft.rfftfreq(luma.shape[0], d=pitch_mm)
    tan = np.abs(np.fft.rfft(lsf_t))
    sag = np.abs(np.fft.rfft(lsf_s))
    tan = tan / tan[0]
    sag = sag / sag[0]
    return MtfCurve(freqs, sag, tan, field_angle_deg, rho)


def mtf50(curve: MtfCurve) -> tuple[float, bool]:
    """First 0.5 crossing of the mean MTF in lp/mm.

    Returns (frequency, saturated); saturated means the curve never
    drops below 0.5 within Nyquist and the Nyquist frequency is
    returned instead.
    """
    m = curve.mean
    f = curve.frequencies
    below = np.nonzero(m < 0.5)[0]
    if len(below) == 0:
        return curve.nyquist, True
    i = below[0]
    if i == 0:
        return float(f[0]), False
    # linear interpolation between the bracketing samples
    f50 = f[i - 1] + (0.5 - m[i - 1]) * (f[i] - f[i - 1]) / (m[i] - m[i - 1])
    return float(f50), False


@dataclass
class CoverageMap:
    rho: np.ndarray           # (P,)
    theta: np.ndarray         # (T,)
    mtf50: np.ndarray         # (P, T) lp/mm
    threshold: float
    covered: np.ndarray = field(init=False)

    def __post_init__(self):
        self.covered = self.mtf50 >= self.threshold

    def region_extent(self):
        """(rho, theta) bounding rectangle of the covered region.

        Returns ((rho_min, rho_max), (theta_min, theta_max), area) where
        area is in normalized-radius x radians units; None if nothing
        is covered.
        """
        if not self.covered.any():
            return None
        pi, ti = np.nonzero(self.covered)
        r0, r1 = self.rho[pi.min()], self.rho[pi.max()]
        t0, t1 = self.theta[ti.min()], self.theta[ti.max()]
        drho = self.rho[1] - self.rho[0] if len(self.rho) > 1 else 1.0
        dth = self.theta[1] - self.theta[0] if len(self.theta) > 1 else 2 * np.pi
        area = self.covered.sum() * drho * dth
        return (float(r0), float(r1)), (float(t0), float(t1)), float(area)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["rho", "theta", "mtf50_lp_mm"])
            for i, r in enumerate(self.rho):
                for j, t in enumerate(self.theta):
                    wr.writerow([f"{r:.6g}", f"{t:.6g}",
                                 f"{self.mtf50[i, j]:.6g}"])


def coverage_map(system: OpticalSystem, expansion: ZernikeExpansion | None,
                 rho_nodes=9, theta_nodes=13, threshold: float = 30.0,
                 rays: int = 20_000, support: int = 64) -> CoverageMap:
    """MTF50 over a polar field grid, thresholded into a fovea region."""
    rho = np.linspace(0.02, 1.0, rho_nodes) if np.isscalar(rho_nodes) \
        else np.asarray(rho_nodes, float)
    theta = np.linspace(-np.pi, np.pi, theta_nodes) if np.isscalar(theta_nodes) \
        else np.asarray(theta_nodes, float)
    grid = np.zeros((len(rho), len(theta)))
    for i, r in enumerate(rho):
        for j, t in enumerate(theta):
            P = optics.object_point_for_field(system, r, t)
            try:
                psf = psf_render(system, expansion, P, rays=rays,
                                 support=support, orientation=t)
                curve = mtf_from_psf(psf, system.sensor.pixel_pitch_um,
                                     rho=r)
                grid[i, j], _ = mtf50(curve)
            except VignettedError:
                grid[i, j] = 0.0
    return CoverageMap(rho, theta, grid, threshold)


def sensor_square_mask(rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Polar cells that fall inside the inscribed square sensor region."""
    R, T = np.meshgrid(rho, theta, indexing="ij")
    lim = 1.0 / (np.sqrt(2) * np.maximum(np.abs(np.cos(T)),
                                         np.abs(np.sin(T))))
    return R <= lim + 1e-12


def images_needed(coverages: dict, threshold: float = 30.0,
                  theta_steps: int = 24) -> dict:
    """Greedy set-cover estimate of patterns needed for full coverage.

    coverages maps anchor radius rho -> CoverageMap of the pattern
    optimized at (rho, theta=0). By the system's rotational symmetry a
    pattern re-optimized at azimuth t0 covers the anchor's region
    shifted by t0, so placements are (anchor, theta shift) pairs over a
    periodic theta grid.

    Returns {"count", "placements", "uncovered_cells"}.
    """
    any_map = next(iter(coverages.values()))
    rho, theta = any_map.rho, any_map.theta
    n_t = len(theta)
    cells = sensor_square_mask(rho, theta)
    if threshold <= 0:
        return {"count": 1 if cells.any() else 0, "placements": [],
                "uncovered_cells": 0}
    masks = {}
    shift_idx = np.linspace(0, n_t - 1, theta_steps, endpoint=False)
    for anchor, cmap in coverages.items():
        cov = cmap.mtf50 >= threshold
        for s in shift_idx:
            masks[(anchor, int(round(s)))] = np.roll(cov, int(round(s)),
                                                     axis=1)
    uncovered = cells.copy()
    chosen = []
    while uncovered.any():
        best, gain = None, 0
        for key, m in masks.items():
            g = int((m & uncovered).sum())
            if g > gain:
                best, gain = key, g
        if best is None or gain == 0:
            break
        chosen.append(best)
        uncovered &= ~masks[best]
    return {
        "count": len(chosen),
        "placements": [(a, float(theta[s])) for a, s in chosen],
        "uncovered_cells": int(uncovered.sum()),
    }
