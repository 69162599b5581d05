"""Independent reference implementations used to check the package.

Everything here is written from first principles with no imports from
the package under test: paraxial ABCD matrices, scalar Snell
refraction, numerical quadrature, finite differences, and closed-form
transfer functions.
"""

import math

import numpy as np


# ---------------------------------------------------------------------------
# paraxial (ABCD) optics
# ---------------------------------------------------------------------------

def abcd_refraction(n1: float, n2: float, radius: float) -> np.ndarray:
    """Paraxial refraction at a spherical interface, y/u convention."""
    return np.array([[1.0, 0.0], [-(n2 - n1) / (radius * n2), n1 / n2]])


def abcd_transfer(distance: float) -> np.ndarray:
    return np.array([[1.0, distance], [0.0, 1.0]])


def lens_abcd(surfaces, wavelength_index=None, indices=None) -> np.ndarray:
    """System matrix of a sequence of (radius, thickness, n_after).

    surfaces: list of (radius_mm, thickness_to_next_mm, n_before, n_after).
    """
    m = np.eye(2)
    for radius, thickness, n1, n2 in surfaces:
        m = abcd_refraction(n1, n2, radius) @ m
        if thickness:
            m = abcd_transfer(thickness) @ m
    return m


def efl_from_abcd(m: np.ndarray) -> float:
    """Effective focal length from the system matrix."""
    return -1.0 / m[1, 0]


def bfl_from_abcd(m: np.ndarray) -> float:
    """Back focal length: where a collimated ray crosses the axis."""
    y, u = m @ np.array([1.0, 0.0])
    return -y / u


def image_distance(m: np.ndarray, object_distance: float) -> float:
    """Back-vertex image distance for an object in front of the system."""
    sys_m = m @ abcd_transfer(object_distance)
    # image plane: output height independent of input angle
    # y' = A y + B u; with y = 0: y' = B u -> propagate d so B + d D = 0
    full = sys_m
    return -full[0, 1] / full[1, 1]


def sellmeier_index(b, c, wavelength_nm: float) -> float:
    """Reference Sellmeier evaluation, coefficients in micrometers^2."""
    lam2 = (wavelength_nm * 1e-3) ** 2
    n2 = 1.0
    for bi, ci in zip(b, c):
        n2 += bi * lam2 / (lam2 - ci)
    return math.sqrt(n2)


# ---------------------------------------------------------------------------
# scalar ray operations
# ---------------------------------------------------------------------------

def snell_scalar(n1: float, n2: float, theta_in: float) -> float:
    """Plane-of-incidence Snell angle; raises on TIR."""
    s = n1 * math.sin(theta_in) / n2
    if abs(s) >= 1.0:
        raise ValueError("total internal reflection")
    return math.asin(s)


def sphere_intersect(origin, direction, center, radius):
    """Smallest positive t with |o + t d - c| = radius, or None."""
    o = np.asarray(origin, float) - np.asarray(center, float)
    d = np.asarray(direction, float)
    b = float(o @ d)
    c = float(o @ o) - radius * radius
    disc = b * b - c
    if disc <= 0:
        return None
    ts = [-b - math.sqrt(disc), -b + math.sqrt(disc)]
    ts = [t for t in ts if t > 1e-12]
    return min(ts) if ts else None


def refract_vector(d, normal, n1, n2):
    """Vector Snell refraction; d and normal unit, normal toward n1 side."""
    d = np.asarray(d, float)
    nrm = np.asarray(normal, float)
    cosi = -float(d @ nrm)
    eta = n1 / n2
    sin2t = eta * eta * (1.0 - cosi * cosi)
    if sin2t >= 1.0:
        return None
    cost = math.sqrt(1.0 - sin2t)
    return eta * d + (eta * cosi - cost) * nrm


# ---------------------------------------------------------------------------
# numerics
# ---------------------------------------------------------------------------

def central_difference(f, x, h):
    """Central finite-difference gradient of scalar/vector f at x."""
    x = np.asarray(x, float)
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def golden_section_max(f, lo, hi, tol=1e-6):
    """Reference golden-section maximizer for unimodal f."""
    g = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    while abs(b - a) > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return (c if fc > fd else d)


def disk_quadrature(n_r=200, n_t=256):
    """Tensor-product quadrature nodes/weights on the unit disk,
    normalized so the total weight is 1 (area measure / pi)."""
    # midpoint rule in r^2 makes the radial weight exact for polynomials
    r = np.sqrt((np.arange(n_r) + 0.5) / n_r)
    t = 2 * np.pi * (np.arange(n_t) + 0.5) / n_t
    R, T = np.meshgrid(r, t, indexing="ij")
    w = np.full(R.size, 1.0 / (n_r * n_t))
    return R.ravel(), T.ravel(), w


# ---------------------------------------------------------------------------
# closed-form image formation
# ---------------------------------------------------------------------------

def gaussian_mtf(freq_lp_mm, sigma_mm: float) -> np.ndarray:
    """MTF of a Gaussian PSF with spatial sigma (mm)."""
    f = np.asarray(freq_lp_mm, float)
    return np.exp(-2 * (np.pi * sigma_mm * f) ** 2)


def zernike_reference(n: int, m: int, rho, theta):
    """Direct radial-sum Zernike evaluation with unit-RMS normale."""
    rho = np.asarray(rho, float)
    theta = np.asarray(theta, float)
    am = abs(m)
    rad = np.zeros_like(rho)
    for k in range((n - am) // 2 + 1):
        c = ((-1) ** k * math.factorial(n - k)
             / (math.factorial(k) * math.factorial((n + am) // 2 - k)
                * math.factorial((n - am) // 2 - k)))
        rad = rad + c * rho ** (n - 2 * k)
    norm = math.sqrt(2 * (n + 1)) if m != 0 else math.sqrt(n + 1)
    if m > 0:
        return norm * rad * np.cos(am * theta)
    if m < 0:
        return norm * rad * np.sin(am * theta)
    return norm * rad
