"""Gradient optimization of phase-plate coefficient sets.

Loss evaluation runs through the torch tracer so the spot-size losses
backpropagate into the Zernike coefficients. The optimizer is Adam with
a per-coefficient learning rate that decays by sqrt(10) per radial
order (betas 0.9/0.999, eps 1e-8). Tilt coefficients are frozen at
zero throughout.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch

from . import optics, zernike
from .analysis import SpotGridStack
from .errors import DivergenceError
from .optics import DTYPE, OpticalSystem
from .zernike import TILT_INDICES, ZernikeExpansion

K_DEFAULT = zernike.num_terms(4)


@dataclass
class OptimizerSchedule:
    base_rate: float = 0.3          # um per Adam step at order 0
    order_decay: float = math.sqrt(10.0)
    iterations: int = 300
    tol: float = 1e-5               # relative loss change for early stop
    patience: int = 20
    rings: int = 2                  # aperture rings for the loss fan

    def rate_vector(self, max_order: int = 4) -> np.ndarray:
        k = zernike.num_terms(max_order)
        lr = np.zeros(k)
        for j in range(k):
            n, _ = zernike.osa_to_nm(j)
            lr[j] = self.base_rate / self.order_decay ** n
        for t in TILT_INDICES:
            lr[t] = 0.0
        return lr


@dataclass
class PatternSet:
    patterns: list                    # list of ZernikeExpansion
    depth: float
    provenance: str                   # single | roi_tiling | joint | defocus_only
    seed: int | None = None
    grid_shape: tuple | None = None
    loss_trace: list = dc_field(default_factory=list)

    def __post_init__(self):
        for p in self.patterns:
            if not p.optimization_ready:
                raise ValueError("pattern has nonzero tilt coefficients")
        if self.provenance == "defocus_only":
            for p in self.patterns:
                free = np.nonzero(p.coeffs)[0]
                if any(j != zernike.osa_index(2, 0) for j in free):
                    raise ValueError("defocus_only pattern has other terms")

    @property
    def budget(self) -> int:
        return len(self.patterns)

    def to_dict(self) -> dict:
        return {
            "provenance": self.provenance,
            "depth_mm": self.depth,
            "budget": self.budget,
            "seed": self.seed,
            "grid_shape": list(self.grid_shape) if self.grid_shape else None,
            "patterns": [p.to_dict() for p in self.patterns],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PatternSet":
        return cls(
            patterns=[ZernikeExpansion.from_dict(p) for p in d["patterns"]],
            depth=d["depth_mm"],
            provenance=d["provenance"],
            seed=d.get("seed"),
            grid_shape=tuple(d["grid_shape"]) if d.get("grid_shape") else None,
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path) -> "PatternSet":
        with open(path) as f:
            return cls.from_dict(json.load(f))


class _Adam:
    """Element-wise Adam over a single coefficient tensor."""

    def __init__(self, lr: np.ndarray, betas=(0.9, 0.999), eps=1e-8):
        self.lr = torch.tensor(lr, dtype=DTYPE)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, w: torch.Tensor, grad: torch.Tensor):
        if self.m is None:
            self.m = torch.zeros_like(grad)
            self.v = torch.zeros_like(grad)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        with torch.no_grad():
            w -= self.lr * mh / (torch.sqrt(vh) + self.eps)


def _fan_tensors(system: OpticalSystem, points: np.ndarray, rings: int):
    """Stacked aperture fans for M field points: (M*Na, 3) tensors."""
    origins, dirs = [], []
    for P in points:
        o, d = optics.aperture_fan(system, np.asarray(P, float), rings)
        origins.append(o)
        dirs.append(d)
    na = len(origins[0])
    o = torch.tensor(np.concatenate(origins), dtype=DTYPE)
    d = torch.tensor(np.concatenate(dirs), dtype=DTYPE)
    return o, d, na


def spot_sizes_torch(system: OpticalSystem, fan, w: torch.Tensor):
    """Differentiable per-point spot sizes (um).

    fan comes from _fan_tensors. w is either (K,) for a single pattern
    (returns (M,)) or (N, K) for a pattern stack (returns (M, N)). The
    paper's formula: mean radial deviation from the all-wavelength
    centroid, averaged per wavelength, then across wavelengths. Dead
    rays are excluded with detached masks.
    """
    if w is not None and w.dim() == 2:
        n = w.shape[0]
        o, d, na = fan
        nrays = o.shape[0]
        o_all = o.repeat(n, 1)
        d_all = d.repeat(n, 1)
        idx = torch.arange(n).repeat_interleave(nrays)
        r = _spot_sizes_flat(system, o_all, d_all, w[idx], na)
        return r.view(n, -1).transpose(0, 1)
    o, d, na = fan
    return _spot_sizes_flat(system, o, d, w, na)


def _spot_sizes_flat(system: OpticalSystem, o, d, w, na: int):
    m = o.shape[0] // na
    pts, masks = [], []
    for lam in system.wavelengths:
        p, alive = optics.trace_batch_torch(system, o, d, lam, w)
        pts.append(p.view(m, na, 2))
        masks.append(alive.view(m, na))
    p = torch.stack(pts)                       # (L, M, Na, 2)
    a = torch.stack(masks).to(DTYPE).detach()  # (L, M, Na)
    wsum = a.sum(dim=(0, 2)).clamp(min=1.0)    # (M,)
    centroid = (p * a.unsqueeze(-1)).sum(dim=(0, 2)) / wsum.unsqueeze(-1)
    dev = torch.sqrt(((p - centroid.unsqueeze(0).unsqueeze(2)) ** 2)
                     .sum(-1) + 1e-18)          # (L, M, Na)
    per_lam = (dev * a).sum(-1) / a.sum(-1).clamp(min=1.0)   # (L, M)
    lam_has = (a.sum(-1) > 0).to(DTYPE)
    r = (per_lam * lam_has).sum(0) / lam_has.sum(0).clamp(min=1.0)
    return r * 1000.0


def _init_coeffs(seed: int | None, n_patterns: int, sigma: float = 0.01,
                 k: int = K_DEFAULT) -> np.ndarray:
    if seed is None or sigma == 0.0:
        w = np.zeros((n_patterns, k))
    else:
        rng = np.random.default_rng(seed)
        w = rng.normal(scale=sigma, size=(n_patterns, k))
    w[:, list(TILT_INDICES)] = 0.0
    return w


def _zero_tilts(w: torch.Tensor):
    with torch.no_grad():
        for t in TILT_INDICES:
            w[..., t] = 0.0


def optimize_single(system: OpticalSystem, points,
                    schedule: OptimizerSchedule | None = None,
                    indices=None, init: np.ndarray | None = None,
                    max_order: int = 4):
    """Minimize the mean spot size over the given ROI sample points.

    indices restricts the free coefficients (e.g. [4] for defocus
    only). Returns (expansion, loss_trace) with the best-seen iterate.
    """
    schedule = schedule or OptimizerSchedule()
    points = np.atleast_2d(np.asarray(points, float))
    k = zernike.num_terms(max_order)
    w0 = np.zeros(k) if init is None else np.asarray(init, float).copy()
    w = torch.tensor(w0, dtype=DTYPE, requires_grad=True)
    lr = schedule.rate_vector(max_order)
    if indices is not None:
        mask = np.zeros(k)
        mask[list(indices)] = 1.0
        lr = lr * mask
    adam = _Adam(lr)
    fan = _fan_tensors(system, points, schedule.rings)

    best_w, best_loss = w0.copy(), None
    trace = []
    since_improve = 0
    for it in range(schedule.iterations):
        if w.grad is not None:
            w.grad = None
        loss = spot_sizes_torch(system, fan, w).mean()
        val = loss.detach().item()
        trace.append(val)
        if best_loss is None:
            best_loss = val
            initial = val
        if val > 10.0 * initial:
            raise DivergenceError(
                f"loss {val:.3g} exceeded 10x initial {initial:.3g} at "
                f"iteration {it}")
        if val < best_loss * (1 - schedule.tol):
            since_improve = 0
        else:
            since_improve += 1
        if val < best_loss:
            best_loss = val
            best_w = w.detach().numpy().copy()
        if since_improve >= schedule.patience:
            break
        loss.backward()
        adam.step(w, w.grad)
        _zero_tilts(w)
    best_w[list(TILT_INDICES)] = 0.0
    return ZernikeExpansion(best_w, system.plate_semi_diameter, max_order), trace


def optimize_defocus_only(system: OpticalSystem, points,
                          schedule: OptimizerSchedule | None = None):
    """Single-coefficient focus adjustment (OSA index 4)."""
    return optimize_single(system, points, schedule,
                           indices=[zernike.osa_index(2, 0)])


def joint_loss(r_stack: np.ndarray):
    """(L_gs, L_hr, L_joint) for an (H, W, N) spot-size stack."""
    r = np.asarray(r_stack, float)
    h, w, n = r.shape
    r_min = r.min(axis=2)
    n_star = r.argmin(axis=2)
    l_gs = float(r_min.mean())
    winners = set(np.unique(n_star))
    degenerate = [i for i in range(n) if i not in winners]
    rbar = r_min.mean()
    l_hr = 0.0
    for i in degenerate:
        l_hr += float((r[:, :, i] * r_min / rbar).mean())
    return l_gs, l_hr, l_gs + l_hr


def _joint_loss_torch(r: torch.Tensor):
    """Differentiable joint loss; weights r_min/rbar_min are detached."""
    r_min, n_star = r.min(dim=2)
    l_gs = r_min.mean()
    winners = torch.unique(n_star)
    weight = (r_min / r_min.mean()).detach()
    l_hr = r.new_zeros(())
    for i in range(r.shape[2]):
        if i not in winners:
            l_hr = l_hr + (r[:, :, i] * weight).mean()
    return l_gs, l_hr, l_gs + l_hr


def field_grid(system: OpticalSystem, shape, margin: float = 0.98):
    """Object points mapped from a uniform grid over the square sensor.

    Uses the chief-ray magnification; distortion at this lens is far
    below the grid pitch.
    """
    h, w = shape
    R = system.sensor.half_diagonal_mm
    half = R / math.sqrt(2) * margin
    probe = optics.chief_ray_sensor_point(
        system, np.array([1.0, 0.0, system.object_z]))
    m = (probe[0] - system.c_img[0]) / 1.0
    ys = np.linspace(-half, half, h)
    xs = np.linspace(-half, half, w)
    X, Y = np.meshgrid(xs, ys)
    pts = np.stack([(X - system.c_img[0]) / m, (Y - system.c_img[1]) / m,
                    np.full_like(X, system.object_z)], axis=-1)
    return pts


def optimize_joint(system: OpticalSystem, budget: int, grid_shape=(32, 32),
                   schedule: OptimizerSchedule | None = None,
                   seed: int = 0, depth: float | None = None,
                   init_patterns: np.ndarray | None = None):
    """Jointly optimize N patterns under the grid-stacking loss.

    Returns (PatternSet, SpotGridStack). Patterns start from small
    random perturbations (or init_patterns for warm starts).
    """
    schedule = schedule or OptimizerSchedule()
    if depth is not None and depth != system.d_img:
        system = system.rebuilt(d_img=depth)
    pts = field_grid(system, grid_shape)
    h, w_ = grid_shape
    flat = pts.reshape(-1, 3)
    fan = _fan_tensors(system, flat, schedule.rings)

    if init_patterns is None:
        w0 = _init_coeffs(seed, budget)
    else:
        w0 = np.asarray(init_patterns, float).copy()
        assert w0.shape[0] == budget
    w = torch.tensor(w0, dtype=DTYPE, requires_grad=True)
    adam = _Adam(np.tile(schedule.rate_vector(), (budget, 1)))

    best = {"loss": None, "w": w0.copy()}
    trace = []
    since_improve = 0
    for it in range(schedule.iterations):
        if w.grad is not None:
            w.grad = None
        r = spot_sizes_torch(system, fan, w).reshape(h, w_, budget)
        l_gs, l_hr, l_joint = _joint_loss_torch(r)
        val = l_joint.detach().item()
        trace.append((l_gs.detach().item(), l_hr.detach().item(), val))
        if best["loss"] is None or val < best["loss"]:
            if best["loss"] is not None and \
                    val > best["loss"] * (1 - schedule.tol):
                since_improve += 1
            else:
                since_improve = 0
            best["loss"] = val
            best["w"] = w.detach().numpy().copy()
        else:
            since_improve += 1
        if since_improve >= schedule.patience:
            break
        l_joint.backward()
        adam.step(w, w.grad)
        _zero_tilts(w)

    wb = best["w"]
    wb[:, list(TILT_INDICES)] = 0.0
    if budget > 1:
        span = np.abs(wb[:, None, :] - wb[None, :, :]).max(axis=2)
        iu = np.triu_indices(budget, 1)
        if span[iu].max() < 1e-6:
            warnings.warn("joint optimization collapsed: all patterns "
                          "identical within tolerance")
    patterns = [ZernikeExpansion(c, system.plate_semi_diameter) for c in wb]
    with torch.no_grad():
        r_final = spot_sizes_torch(
            system, fan, torch.tensor(wb, dtype=DTYPE)
        ).reshape(h, w_, budget).numpy()
    stack = SpotGridStack(r_final, pts, system.d_img)
    pset = PatternSet(patterns, system.d_img, "joint", seed=seed,
                      grid_shape=grid_shape, loss_trace=trace)
    return pset, stack


def optimize_roi_tiling(system: OpticalSystem, k: int,
                        schedule: OptimizerSchedule | None = None,
                        samples_per_roi: int = 3,
                        depth: float | None = None) -> PatternSet:
    """k x k independent single-ROI optimizations tiling the sensor."""
    schedule = schedule or OptimizerSchedule()
    if depth is not None and depth != system.d_img:
        system = system.rebuilt(d_img=depth)
    n = k * samples_per_roi
    pts = field_grid(system, (n, n))
    patterns = []
    for i in range(k):
        for j in range(k):
            roi = pts[i * samples_per_roi:(i + 1) * samples_per_roi,
                      j * samples_per_roi:(j + 1) * samples_per_roi]
            exp, _ = optimize_single(system, roi.reshape(-1, 3), schedule)
            patterns.append(exp)
    return PatternSet(patterns, system.d_img, "roi_tiling",
                      grid_shape=(k, k))


def evaluate_stack(system: OpticalSystem, pattern_set: PatternSet,
                   grid_shape=(32, 32), rings: int = 2) -> SpotGridStack:
    """Spot-size stack of an existing pattern set on a field grid."""
    pts = field_grid(system, grid_shape)
    fan = _fan_tensors(system, pts.reshape(-1, 3), rings)
    wb = np.stack([p.coeffs for p in pattern_set.patterns])
    with torch.no_grad():
        r = spot_sizes_torch(system, fan, torch.tensor(wb, dtype=DTYPE))
        r = r.reshape(grid_shape + (len(wb),)).numpy()
    return SpotGridStack(r, pts, system.d_img)


def disparity_depths(near: float, far: float, count: int) -> list:
    """Depths evenly spaced in disparity (1/distance)."""
    inv = np.linspace(1.0 / near, 1.0 / far, count)
    return [float(1.0 / d) for d in inv]


def multi_depth_patterns(system: OpticalSystem, depths, budget: int,
                         grid_shape=(16, 16),
                         schedule: OptimizerSchedule | None = None,
                         seed: int = 0) -> list:
    """Independent joint optimization per depth plane."""
    depths = sorted(depths)
    if len(depths) >= 3:
        inv = np.array([1.0 / d for d in depths])
        steps = np.diff(inv)
        if not np.allclose(steps, steps[0], rtol=1e-3):
            raise ValueError("depths must be evenly spaced in 1/distance")
    out = []
    for i, d in enumerate(depths):
        pset, _ = optimize_joint(system, budget, grid_shape, schedule,
                                 seed=seed + i, depth=d)
        out.append(pset)
    return out


def budget_curve(system: OpticalSystem, budgets, grid_shape=(32, 32),
                 schedule: OptimizerSchedule | None = None, seed: int = 0):
    """Mean r_min vs imaging budget, warm-starting each N from N-1.

    Returns list of dicts {budget, mean_r_min, pattern_set}.
    """
    budgets = sorted(budgets)
    results = []
    prev_w = None
    rng = np.random.default_rng(seed)
    for n in budgets:
        if prev_w is None:
            init = None
        else:
            extra = n - prev_w.shape[0]
            if extra > 0:
                # clone existing winners and perturb to break symmetry
                clones = prev_w[rng.integers(0, prev_w.shape[0], extra)]
                noise = rng.normal(scale=0.01, size=clones.shape)
                init = np.vstack([prev_w, clones + noise])
                init[:, list(TILT_INDICES)] = 0.0
            else:
                init = prev_w[:n]
        pset, stack = optimize_joint(system, n, grid_shape, schedule,
                                     seed=seed, init_patterns=init)
        prev_w = np.stack([p.coeffs for p in pset.patterns])
        results.append({
            "budget": n,
            "mean_r_min": float(stack.r_min.mean()),
            "pattern_set": pset,
        })
    # an N-image budget can always replay the best smaller set (padding
    # with a duplicate), so clamp any stochastic regression
    for i in range(1, len(results)):
        if results[i]["mean_r_min"] > results[i - 1]["mean_r_min"]:
            prev = results[i - 1]["pattern_set"]
            pats = list(prev.patterns)
            while len(pats) < results[i]["budget"]:
                pats.append(pats[0])
            results[i]["mean_r_min"] = results[i - 1]["mean_r_min"]
            results[i]["pattern_set"] = PatternSet(
                pats, prev.depth, "joint", seed=prev.seed,
                grid_shape=prev.grid_shape)
    return results
