"""Zernike polynomial basis on the unit disk (OSA/ANSI single indexing).

Each basis function is normalized to unit RMS over the disk:
N = sqrt(n+1) for m = 0, sqrt(2(n+1)) otherwise. Terms are expanded once
into exact bivariate monomials in (x/R, y/R), so evaluation and the
Cartesian gradient are plain polynomial sums with no polar singularity
at the origin.

Coefficient units are micrometers of optical path difference; spatial
coordinates are millimeters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .errors import DegenerateFitError, OutsideApertureError

TILT_INDICES = (1, 2)


def osa_index(n: int, m: int) -> int:
    """OSA/ANSI single index j for radial order n, azimuthal frequency m."""
    if n < 0 or abs(m) > n or (n - abs(m)) % 2 != 0:
        raise ValueError(f"invalid Zernike indices (n={n}, m={m})")
    return (n * (n + 2) + m) // 2


def osa_to_nm(j: int) -> tuple[int, int]:
    """Inverse of osa_index."""
    if j < 0:
        raise ValueError(f"invalid OSA index {j}")
    n = int((-1 + math.sqrt(1 + 8 * j)) // 2)
    while n * (n + 2) < 2 * j - n:
        n += 1
    m = 2 * j - n * (n + 2)
    if abs(m) > n or (n - abs(m)) % 2 != 0:
        raise ValueError(f"invalid OSA index {j}")
    return n, m


def num_terms(max_order: int) -> int:
    return (max_order + 1) * (max_order + 2) // 2


@lru_cache(maxsize=None)
def monomials(j: int) -> tuple[tuple[float, int, int], ...]:
    """Monomial expansion of the j-th basis function.

    Returns tuples (coefficient, p, q) such that
    Z_j(u, v) = sum coeff * u**p * v**q with u = x/R, v = y/R.
    Combinatorics carried as exact fractions; the RMS normalization is
    the only floating multiplier.
    """
    n, m = osa_to_nm(j)
    am = abs(m)
    terms: dict[tuple[int, int], Fraction] = {}

    for s in range((n - am) // 2 + 1):
        c_s = Fraction(
            (-1) ** s * math.factorial(n - s),
            math.factorial(s)
            * math.factorial((n + am) // 2 - s)
            * math.factorial((n - am) // 2 - s),
        )
        k = (n - 2 * s - am) // 2  # power of (u^2 + v^2)
        # rho^am * cos/sin(am*phi) as monomials in (u, v)
        ang: dict[tuple[int, int], Fraction] = {}
        if m >= 0:
            for t in range(0, am + 1, 2):
                ang[(am - t, t)] = Fraction((-1) ** (t // 2) * math.comb(am, t))
            if am == 0:
                ang[(0, 0)] = Fraction(1)
        else:
            for t in range(1, am + 1, 2):
                ang[(am - t, t)] = Fraction((-1) ** ((t - 1) // 2) * math.comb(am, t))
        for a in range(k + 1):
            radial = Fraction(math.comb(k, a))
            for (p, q), cc in ang.items():
                key = (p + 2 * a, q + 2 * (k - a))
                terms[key] = terms.get(key, Fraction(0)) + c_s * radial * cc

    norm = math.sqrt(n + 1) if m == 0 else math.sqrt(2 * (n + 1))
    return tuple(
        (float(c) * norm, p, q) for (p, q), c in sorted(terms.items()) if c != 0
    )


@lru_cache(maxsize=None)
def basis_tables(max_order: int):
    """Stacked monomial tables for all terms up to max_order.

    Returns (coeffs, px, py) arrays of shape (K, T) where T is the
    largest monomial count; unused slots have zero coefficient.
    """
    K = num_terms(max_order)
    tabs = [monomials(j) for j in range(K)]
    T = max(len(t) for t in tabs)
    coeffs = np.zeros((K, T))
    px = np.zeros((K, T), dtype=int)
    py = np.zeros((K, T), dtype=int)
    for j, tab in enumerate(tabs):
        for i, (c, p, q) in enumerate(tab):
            coeffs[j, i] = c
            px[j, i] = p
            py[j, i] = q
    return coeffs, px, py


def _eval_terms(u, v, max_order: int):
    """Evaluate all K basis terms at normalized coordinates (u, v).

    u, v: arrays of any shape; returns array of shape (K,) + u.shape.
    Powers built by repeated multiplication so this also works inside a
    torch autograd graph (u, v may be torch tensors).
    """
    coeffs, px, py = basis_tables(max_order)
    pmax = int(max(px.max(), py.max()))
    upows = [u * 0 + 1.0]
    vpows = [v * 0 + 1.0]
    for _ in range(pmax):
        upows.append(upows[-1] * u)
        vpows.append(vpows[-1] * v)
    out = []
    for j in range(coeffs.shape[0]):
        acc = u * 0.0
        for c, p, q in zip(coeffs[j], px[j], py[j]):
            if c != 0.0:
                acc = acc + c * upows[int(p)] * vpows[int(q)]
        out.append(acc)
    return out


@lru_cache(maxsize=None)
def gradient_tables(max_order: int):
    """Monomial tables of (dZ/du, dZ/dv) for all terms up to max_order."""
    K = num_terms(max_order)
    du, dv = [], []
    for j in range(K):
        du_j, dv_j = [], []
        for c, p, q in monomials(j):
            if p > 0:
                du_j.append((c * p, p - 1, q))
            if q > 0:
                dv_j.append((c * q, p, q - 1))
        du.append(tuple(du_j))
        dv.append(tuple(dv_j))
    return tuple(du), tuple(dv)


def _eval_monomial_list(tab, upows, vpows, zero):
    acc = zero
    for c, p, q in tab:
        acc = acc + c * upows[p] * vpows[q]
    return acc


def eval_term_gradients(u, v, max_order: int):
    """(dZ_j/du, dZ_j/dv) for every term; works on numpy or torch inputs."""
    du_tabs, dv_tabs = gradient_tables(max_order)
    pmax = max(max_order, 1)
    upows = [u * 0 + 1.0]
    vpows = [v * 0 + 1.0]
    for _ in range(pmax):
        upows.append(upows[-1] * u)
        vpows.append(vpows[-1] * v)
    zero = u * 0.0
    gu = [_eval_monomial_list(t, upows, vpows, zero) for t in du_tabs]
    gv = [_eval_monomial_list(t, upows, vpows, zero) for t in dv_tabs]
    return gu, gv


@dataclass(frozen=True)
class ZernikeExpansion:
    """OPD surface as a Zernike coefficient vector (OSA indexing).

    coeffs: micrometers of OPD per unit-RMS basis term.
    aperture_radius: normalization radius in mm.
    """

    coeffs: np.ndarray
    aperture_radius: float
    max_order: int = 4

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        object.__setattr__(self, "coeffs", c)
        if c.shape != (num_terms(self.max_order),):
            raise ValueError(
                f"expected {num_terms(self.max_order)} coefficients for "
                f"order {self.max_order}, got {c.shape}"
            )
        if self.aperture_radius <= 0:
            raise ValueError("aperture_radius must be positive")

    @property
    def optimization_ready(self) -> bool:
        return all(self.coeffs[i] == 0.0 for i in TILT_INDICES)

    def eval_polar(self, rho, phi):
        """OPD in micrometers at normalized radius rho, azimuth phi."""
        rho = np.asarray(rho, dtype=float)
        phi = np.asarray(phi, dtype=float)
        if np.any(rho > 1.0 + 1e-12):
            raise OutsideApertureError("rho > 1")
        return self.eval_xy(
            rho * np.cos(phi) * self.aperture_radius,
            rho * np.sin(phi) * self.aperture_radius,
            check=False,
        )

    def eval_xy(self, x_mm, y_mm, check: bool = True):
        """OPD in micrometers at Cartesian point(s) in mm."""
        x = np.asarray(x_mm, dtype=float)
        y = np.asarray(y_mm, dtype=float)
        if check and np.any(x * x + y * y > self.aperture_radius**2 * (1 + 1e-12)):
            raise OutsideApertureError("point outside aperture")
        u = x / self.aperture_radius
        v = y / self.aperture_radius
        terms = _eval_terms(u, v, self.max_order)
        out = u * 0.0
        for w, t in zip(self.coeffs, terms):
            out = out + w * t
        return out

    def grad_cartesian(self, x_mm, y_mm, check: bool = True):
        """(dD/dx, dD/dy) in micrometers per millimeter."""
        x = np.asarray(x_mm, dtype=float)
        y = np.asarray(y_mm, dtype=float)
        if check and np.any(x * x + y * y > self.aperture_radius**2 * (1 + 1e-12)):
            raise OutsideApertureError("point outside aperture")
        u = x / self.aperture_radius
        v = y / self.aperture_radius
        gu, gv = eval_term_gradients(u, v, self.max_order)
        dx = u * 0.0
        dy = v * 0.0
        for w, tu, tv in zip(self.coeffs, gu, gv):
            dx = dx + w * tu
            dy = dy + w * tv
        return dx / self.aperture_radius, dy / self.aperture_radius

    def with_coeffs(self, coeffs) -> "ZernikeExpansion":
        return ZernikeExpansion(np.asarray(coeffs, float), self.aperture_radius,
                                self.max_order)

    def to_dict(self) -> dict:
        return {
            "max_order": self.max_order,
            "aperture_radius_mm": self.aperture_radius,
            "coeffs_um": self.coeffs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ZernikeExpansion":
        return cls(np.asarray(d["coeffs_um"], float), d["aperture_radius_mm"],
                   d["max_order"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "ZernikeExpansion":
        return cls.from_dict(json.loads(s))

    @classmethod
    def zero(cls, aperture_radius: float, max_order: int = 4) -> "ZernikeExpansion":
        return cls(np.zeros(num_terms(max_order)), aperture_radius, max_order)


def fit(samples, max_order: int, aperture_radius: float,
        rcond: float = 1e-10) -> tuple[ZernikeExpansion, float]:
    """Least-squares Zernike fit of sampled OPD values.

    samples: iterable of (x_mm, y_mm, opd_um). Returns the expansion and
    the residual RMS in micrometers.
    """
    pts = np.asarray(list(samples), dtype=float)
    K = num_terms(max_order)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("samples must be (x, y, value) triples")
    if pts.shape[0] < K:
        raise DegenerateFitError(
            f"need at least {K} samples for order {max_order}, got {pts.shape[0]}"
        )
    x, y, val = pts[:, 0], pts[:, 1], pts[:, 2]
    if np.any(x * x + y * y > aperture_radius**2 * (1 + 1e-9)):
        raise OutsideApertureError("fit sample outside aperture")
    u = x / aperture_radius
    v = y / aperture_radius
    design = np.stack(_eval_terms(u, v, max_order), axis=1)
    coeffs, _, rank, _ = np.linalg.lstsq(design, val, rcond=rcond)
    if rank < K:
        raise DegenerateFitError(f"design matrix rank {rank} < {K}")
    resid = design @ coeffs - val
    rms = float(np.sqrt(np.mean(resid**2)))
    return ZernikeExpansion(coeffs, aperture_radius, max_order), rms
