"""Image-based recovery of assembly distances.

The "captured" set is rendered from a hidden perturbed system; the
calibrator re-renders candidates and maximizes the mean SSIM against
those captures by coordinate descent with golden-section line searches.
Derivative-free search is deliberate: the patchwise renderer is only
piecewise smooth across PSF-anchor seams.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import cv2
import numpy as np

from . import imaging
from .errors import ConfigError, DivergenceError
from .fusion import metrics
from .imaging import Scene
from .optics import OpticalSystem

GOLDEN = (math.sqrt(5) - 1) / 2

# SSIM this low after the first sweep means the search started outside
# the convergence basin
ABORT_SSIM = 0.3

# render settings for calibration: a small center crop at fine pitch so
# sub-pixel blur changes stay visible
RENDER_KW = dict(psf_grid=2, resolution=128, pixel_pitch_um=24.0,
                 psf_rays=3_000, psf_support=25)


@dataclass
class CalibrationProblem:
    """Captured images with the patterns and stage offsets behind them.

    captured[i] pairs with (patterns[i // S], stage_offsets[i % S]) for
    S stage offsets: every pattern is captured at every offset. Stage
    offsets displace the object plane (d_img) by a known amount.
    """

    captured: list                     # rendered or measured images
    patterns: list                     # ZernikeExpansion per pattern
    stage_offsets: list                # mm, applied to d_img
    initial: dict                      # d_dpp, d_sensor, d_img, c_img guesses
    # d_dpp comes last: its SSIM peak location is biased by residual
    # focus and alignment errors, so those must settle first
    free: tuple = ("d_sensor", "c_img_x", "c_img_y", "d_dpp")
    render_kw: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.patterns) < 2:
            raise ConfigError("need at least 2 distinct plate patterns")
        if len(self.stage_offsets) < 2:
            raise ConfigError("need at least 2 stage positions")
        if len(self.captured) != len(self.patterns) * len(self.stage_offsets):
            raise ConfigError("captured count must be patterns x offsets")


# search bracket half-width per parameter, mm
BRACKETS = {"d_sensor": 0.8, "d_dpp": 1.6, "d_img": 5.0,
            "c_img_x": 0.8, "c_img_y": 0.8}

# after phase-correlation alignment the residual image shift is well
# under a pixel, and the SSIM peak in c_img is only a few pixels wide;
# a narrow bracket keeps golden section from stepping over it
C_IMG_BRACKET_ALIGNED = 0.12

# line-search precision per parameter (at the default tol of 0.02).
# SSIM is far stiffer in image centering than in the spacings: a few
# microns of residual c_img error already costs more SSIM than the
# whole d_dpp signal, which biases every conditional spacing search.
SEARCH_TOL = {"d_sensor": 0.005, "d_dpp": 0.02, "d_img": 0.05,
              "c_img_x": 0.002, "c_img_y": 0.002}

# plate spacing is nearly degenerate with the other parameters: moving
# the plate mostly refocuses (undone by d_sensor at ~12x leverage) and
# rescales the image by ~1.7e-3 per mm, which a micron-level c_img
# shift can mask. Coordinate descent stalls on those ridges, so a
# final profile search scans d_dpp while re-optimizing the compensating
# parameters at every candidate.
RIDGE_DPP_HALF = 0.6       # d_dpp profile half-width, mm
RIDGE_COMP_HALF = {"c_img_x": 0.002, "c_img_y": 0.002, "d_sensor": 0.03}
RIDGE_ACCEPT_SLACK = 5e-5  # SSIM ripple floor near the degenerate peak


def _apply_params(base: OpticalSystem, params: dict) -> dict:
    return {
        "d_dpp": params["d_dpp"],
        "d_sensor": params["d_sensor"],
        "d_img": params["d_img"],
        "c_img": np.array([params["c_img_x"], params["c_img_y"]]),
    }


def render_problem(system: OpticalSystem, scene: Scene, patterns,
                   stage_offsets, params: dict, render_kw=None) -> list:
    """Renders for every (pattern, stage offset) pair under params."""
    kw = dict(RENDER_KW)
    kw.update(render_kw or {})
    out = []
    for pat in patterns:
        for off in stage_offsets:
            p = dict(params)
            p["d_img"] = params["d_img"] + off
            sys_i = system.rebuilt(**_apply_params(system, p))
            sc = Scene(scene.texture, scene.extent_mm, sys_i.d_img)
            out.append(imaging.render(sc, sys_i, pat, **kw))
    return out


def make_problem(system: OpticalSystem, scene: Scene, patterns,
                 stage_offsets, true_params: dict, initial: dict,
                 render_kw=None) -> CalibrationProblem:
    """Synthetic problem: captures rendered from the hidden true system."""
    captured = render_problem(system, scene, patterns, stage_offsets,
                              true_params, render_kw)
    return CalibrationProblem(captured, list(patterns), list(stage_offsets),
                              dict(initial), render_kw=dict(render_kw or {}))


def mean_ssim(problem: CalibrationProblem, system: OpticalSystem,
              scene: Scene, params: dict) -> float:
    rendered = render_problem(system, scene, problem.patterns,
                              problem.stage_offsets, params,
                              problem.render_kw)
    vals = [metrics(r, c)["ssim"]
            for r, c in zip(rendered, problem.captured)]
    return float(np.mean(vals))


def _golden_max(f, lo: float, hi: float, tol: float):
    """Golden-section maximization of a unimodal scalar function."""
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while abs(b - a) > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return (c, fc) if fc > fd else (d, fd)


def _scan_then_golden(f, lo: float, hi: float, tol: float, samples: int = 7):
    """Coarse grid scan, then golden refinement around the best sample.

    The SSIM objective is flat near its maximum with ray-quantization
    ripple well above the local curvature, which misleads pure golden
    section; the scan pins the global peak to one grid cell first.
    """
    xs = np.linspace(lo, hi, samples)
    fs = [f(x) for x in xs]
    i = int(np.argmax(fs))
    a = xs[max(i - 1, 0)]
    b = xs[min(i + 1, samples - 1)]
    if b - a <= tol:
        return float(xs[i]), fs[i]
    x, fx = _golden_max(f, float(a), float(b), tol)
    if fs[i] > fx:
        return float(xs[i]), fs[i]
    return x, fx


def _parabola_peak(xs, fs):
    """Vertex of the parabola through the best sample and its neighbors.

    Returns (x, f) estimates; falls back to the best sample at the grid
    edge or when the fit is not concave. xs must be uniformly spaced.
    """
    i = int(np.argmax(fs))
    if 0 < i < len(xs) - 1:
        f0, f1, f2 = fs[i - 1], fs[i], fs[i + 1]
        den = f0 - 2.0 * f1 + f2
        if den < 0:
            h = xs[1] - xs[0]
            x = xs[i] + 0.5 * h * (f0 - f2) / den
            fv = f1 - (f0 - f2) ** 2 / (8.0 * den)
            return float(x), float(fv)
    return float(xs[i]), float(fs[i])


def estimate_image_shift(rendered: np.ndarray, captured: np.ndarray,
                         pixel_pitch_um: float) -> np.ndarray:
    """Sensor-plane translation (mm) aligning a render to a capture.

    Phase correlation on the luminance; positive values mean the
    capture sits at larger sensor coordinates. Used to initialize
    c_img before the SSIM search.
    """
    a = np.float32(rendered.mean(axis=2) if rendered.ndim == 3 else rendered)
    b = np.float32(captured.mean(axis=2) if captured.ndim == 3 else captured)
    win = cv2.createHanningWindow(a.shape[::-1], cv2.CV_32F)
    (dx, dy), _ = cv2.phaseCorrelate(a, b, win)
    return np.array([dx, dy]) * pixel_pitch_um * 1e-3


def calibrate(problem: CalibrationProblem, system: OpticalSystem,
              scene: Scene, sweeps: int = 3, tol: float = 0.02,
              shift_init: bool = True) -> dict:
    """Recover the free parameters by SSIM coordinate descent.

    Returns a report dict with initial/final parameters, the SSIM trace
    of accepted steps, and per-image final SSIM values.
    """
    params = {
        "d_dpp": system.d_dpp,
        "d_sensor": system.d_sensor,
        "d_img": system.d_img,
        "c_img_x": float(system.c_img[0]),
        "c_img_y": float(system.c_img[1]),
    }
    params.update(problem.initial)
    initial = dict(params)

    brackets = dict(BRACKETS)
    if shift_init and {"c_img_x", "c_img_y"} <= set(problem.free):
        kw = dict(RENDER_KW)
        kw.update(problem.render_kw)
        first = render_problem(system, scene, problem.patterns[:1],
                               problem.stage_offsets[:1], params,
                               problem.render_kw)[0]
        shift = estimate_image_shift(first, problem.captured[0],
                                     kw["pixel_pitch_um"])
        params["c_img_x"] += shift[0]
        params["c_img_y"] += shift[1]
        brackets["c_img_x"] = C_IMG_BRACKET_ALIGNED
        brackets["c_img_y"] = C_IMG_BRACKET_ALIGNED

    trace = [mean_ssim(problem, system, scene, params)]
    evals = [1]

    def objective(name, value):
        trial = dict(params)
        trial[name] = value
        evals[0] += 1
        return mean_ssim(problem, system, scene, trial)

    tols = {name: SEARCH_TOL[name] * tol / 0.02 for name in problem.free}
    moved = {name: math.inf for name in problem.free}
    for sweep in range(sweeps):
        shrink = 0.5 ** sweep
        for name in problem.free:
            if moved[name] < tols[name]:
                continue   # settled in the previous sweep
            half = brackets[name] * shrink
            best, val = _scan_then_golden(
                lambda v: objective(name, v),
                params[name] - half, params[name] + half,
                tol=tols[name],
                samples=7 if sweep == 0 else 5)
            if val >= trace[-1]:
                moved[name] = abs(best - params[name])
                params[name] = best
                trace.append(val)
            else:
                moved[name] = 0.0
        if sweep == 0 and trace[-1] < ABORT_SSIM:
            raise DivergenceError(
                f"mean SSIM {trace[-1]:.3f} after first sweep; initial "
                "parameters are likely outside the convergence basin")

    comp = [n for n in RIDGE_COMP_HALF if n in problem.free]
    if "d_dpp" in problem.free and comp:
        dpp_grid = params["d_dpp"] + np.linspace(
            -RIDGE_DPP_HALF, RIDGE_DPP_HALF, 7)

        def reoptimize(dpp, state):
            """Parabola refinement of each compensating parameter at a
            fixed d_dpp candidate; returns (state, value)."""
            state = dict(state)
            state["d_dpp"] = dpp
            val = None
            for name in comp:
                xs = state[name] + np.linspace(-RIDGE_COMP_HALF[name],
                                               RIDGE_COMP_HALF[name], 5)
                fs = []
                for x in xs:
                    state[name] = x
                    evals[0] += 1
                    fs.append(mean_ssim(problem, system, scene, state))
                state[name], val = _parabola_peak(xs, fs)
            return state, val

        # walk outward from the center, re-seeding each candidate from
        # the previous one so the compensation brackets track the
        # ridge; a fixed bracket clips at the outer candidates and
        # biases the profile edges low
        mid = len(dpp_grid) // 2
        profile = [None] * len(dpp_grid)
        for seq in (range(mid, len(dpp_grid)), range(mid - 1, -1, -1)):
            state = profile[mid][0] if profile[mid] is not None else params
            for i in seq:
                profile[i] = reoptimize(dpp_grid[i], state)
                state = profile[i][0]
        # the compensated profile varies by barely more than the render
        # ripple, so fit one quadratic to all samples instead of
        # trusting the pointwise maximum
        prof_f = np.array([p[1] for p in profile])
        a2, a1, _ = np.polyfit(dpp_grid, prof_f, 2)
        if a2 < 0:
            dpp = float(np.clip(-a1 / (2 * a2), dpp_grid[0], dpp_grid[-1]))
        else:
            dpp = float(dpp_grid[int(np.argmax(prof_f))])
        # the compensating parameters track d_dpp linearly on the ridge
        trial = dict(params)
        trial["d_dpp"] = dpp
        for name in comp:
            line = np.polyfit(dpp_grid, [p[0][name] for p in profile], 1)
            trial[name] = float(np.polyval(line, dpp))
        evals[0] += 1
        val = mean_ssim(problem, system, scene, trial)
        if val >= trace[-1] - RIDGE_ACCEPT_SLACK:
            params.update(trial)
            if val >= trace[-1]:
                trace.append(val)

    rendered = render_problem(system, scene, problem.patterns,
                              problem.stage_offsets, params,
                              problem.render_kw)
    per_image = [metrics(r, c)["ssim"]
                 for r, c in zip(rendered, problem.captured)]
    return {
        "initial": initial,
        "final": params,
        "ssim_trace": trace,
        "final_mean_ssim": float(np.mean(per_image)),
        "per_image_ssim": per_image,
        "objective_evaluations": evals[0],
    }


def save_report(report: dict, path):
    with open(path, "w") as f:
        json.dump(report, f, indent=2)
