"""Sequential ray tracing through the phase-plate + doublet camera.

Geometry convention: the phase plate sits at z = 0 and rays travel
toward +z. The object (displayed image) plane is at z = -d_img, the
aperture stop is a plane just in front of the plate, the doublet starts
at z = d_dpp and the sensor sits d_sensor behind the doublet's back
vertex. All lengths in mm, OPD coefficients in micrometers.

The batch tracer is written in torch so sensor positions are
differentiable with respect to the plate's Zernike coefficients; the
per-ray public API wraps it in numpy.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from . import _zernike_dense, zernike
from .errors import ConfigError, VignettedError
from .materials import refractive_index
from .zernike import ZernikeExpansion

DTYPE = torch.float64

# minimum forward travel between surfaces; guards against re-hitting
# the same surface
T_EPS = 1e-10

# converts OPD slopes (um/mm) to dimensionless direction increments
SLOPE_SCALE = 1e-3

STOP_GAP_MM = 1.0  # stop plane sits this far in front of the phase plate

# relative slack on aperture checks so rays aimed exactly at the rim
# are not lost to rounding
APERTURE_TOL = 1.0 + 1e-9


@dataclass
class Ray:
    origin: np.ndarray        # (3,) mm
    direction: np.ndarray     # (3,) unit vector
    wavelength: float         # nm
    alive: bool = True

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        d = np.asarray(self.direction, dtype=float)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            d = d / n
        self.direction = d


@dataclass(frozen=True)
class Surface:
    kind: str                 # phase_plate | spherical_refractor | planar_refractor | stop | sensor
    axial_position: float     # mm, vertex position
    semi_diameter: float
    curvature_radius: float = 0.0   # spherical only
    material_before: str = "air"
    material_after: str = "air"

    def __post_init__(self):
        if self.semi_diameter <= 0:
            raise ValueError("semi_diameter must be positive")
        if self.kind == "spherical_refractor" and \
                abs(self.curvature_radius) <= self.semi_diameter:
            raise ValueError("spherical surface overruns hemisphere")


@dataclass
class SensorSpec:
    pixel_pitch_um: float
    resolution: int

    @property
    def half_diagonal_mm(self) -> float:
        return self.pixel_pitch_um * 1e-3 * self.resolution * math.sqrt(2) / 2


@dataclass
class OpticalSystem:
    surfaces: list
    d_dpp: float
    d_sensor: float
    d_img: float
    c_img: np.ndarray
    wavelengths: tuple
    sensor: SensorSpec
    plate_semi_diameter: float
    stop_semi_diameter: float

    def __post_init__(self):
        self.c_img = np.asarray(self.c_img, dtype=float)
        zs = [s.axial_position for s in self.surfaces]
        if any(b <= a for a, b in zip(zs, zs[1:])):
            raise ConfigError("surfaces must be strictly ordered along the axis")
        kinds = [s.kind for s in self.surfaces]
        if kinds.count("stop") != 1 or kinds.count("sensor") != 1 \
                or kinds.count("phase_plate") != 1:
            raise ConfigError("system needs exactly one stop, plate and sensor")
        if kinds[-1] != "sensor":
            raise ConfigError("sensor must be the last surface")
        self._efl = None

    @property
    def object_distance(self) -> float:
        return self.d_img

    @property
    def object_z(self) -> float:
        return -self.d_img

    @property
    def stop_z(self) -> float:
        return -STOP_GAP_MM

    @property
    def effective_focal_length(self) -> float:
        """EFL measured by tracing a near-axis parallel ray."""
        if self._efl is None:
            h = 1e-4
            o = np.array([[h, 0.0, self.stop_z - 1.0]])
            d = np.array([[0.0, 0.0, 1.0]])
            p, alive, dirs = _trace_numpy(self, o, d, 587.6, None,
                                          return_directions=True)
            if not alive[0]:
                raise VignettedError("paraxial ray vignetted")
            # back-project to the axis crossing: f = h / tan(u')
            u = dirs[0]
            self._efl = float(h / (-u[0] / u[2]))
        return self._efl

    def rebuilt(self, *, d_dpp=None, d_sensor=None, d_img=None, c_img=None):
        """New system with adjusted assembly distances."""
        return build_system(
            lens_surfaces=self._lens_spec,
            d_dpp=self.d_dpp if d_dpp is None else d_dpp,
            d_sensor=self.d_sensor if d_sensor is None else d_sensor,
            d_img=self.d_img if d_img is None else d_img,
            c_img=self.c_img if c_img is None else c_img,
            wavelengths=self.wavelengths,
            sensor=self.sensor,
            plate_semi_diameter=self.plate_semi_diameter,
            stop_semi_diameter=self.stop_semi_diameter,
        )


def load_lens_file(path) -> list:
    """Lens prescription from JSON: list of spherical surfaces."""
    data = json.loads(Path(path).read_text())
    return data["surfaces"]


def _packaged_lens(name: str) -> list:
    with resources.files("foveastack.data").joinpath(name).open() as f:
        return json.load(f)["surfaces"]


def build_system(lens_surfaces, d_dpp, d_sensor, d_img, c_img, wavelengths,
                 sensor, plate_semi_diameter=5.0,
                 stop_semi_diameter=4.0) -> OpticalSystem:
    surfaces = [
        Surface("stop", -STOP_GAP_MM, stop_semi_diameter),
        Surface("phase_plate", 0.0, plate_semi_diameter),
    ]
    z = d_dpp
    mat = "air"
    for spec in lens_surfaces:
        surfaces.append(Surface(
            kind=spec["type"],
            axial_position=z,
            semi_diameter=spec["semi_diameter_mm"],
            curvature_radius=spec.get("radius_mm", 0.0),
            material_before=mat,
            material_after=spec["material"],
        ))
        mat = spec["material"]
        z += spec["thickness_to_next_mm"]
    surfaces.append(Surface("sensor", z + d_sensor, 1e4))
    sys_ = OpticalSystem(
        surfaces=surfaces,
        d_dpp=d_dpp,
        d_sensor=d_sensor,
        d_img=d_img,
        c_img=np.asarray(c_img, float),
        wavelengths=tuple(wavelengths),
        sensor=sensor if isinstance(sensor, SensorSpec) else SensorSpec(**sensor),
        plate_semi_diameter=plate_semi_diameter,
        stop_semi_diameter=stop_semi_diameter,
    )
    sys_._lens_spec = lens_surfaces
    return sys_


def load_system(config) -> OpticalSystem:
    """System from a config dict or JSON file path."""
    if isinstance(config, (str, Path)):
        cfg = json.loads(Path(config).read_text())
        base = Path(config).parent
    else:
        cfg = dict(config)
        base = None
    lens_name = cfg["lens_file"]
    lens_path = (base / lens_name) if base and (base / lens_name).exists() else None
    if lens_path is not None:
        lens = load_lens_file(lens_path)
    else:
        try:
            lens = _packaged_lens(lens_name)
        except FileNotFoundError:
            raise ConfigError(f"lens file {lens_name!r} not found")
    sensor = cfg["sensor"]
    return build_system(
        lens_surfaces=lens,
        d_dpp=cfg["d_dpp_mm"],
        d_sensor=cfg["d_sensor_mm"],
        d_img=cfg["d_img_mm"],
        c_img=cfg.get("c_img_mm", [0.0, 0.0]),
        wavelengths=cfg.get("wavelengths_nm", [486.1, 587.6, 656.3]),
        sensor=SensorSpec(sensor["pixel_pitch_um"], sensor["resolution"]),
        plate_semi_diameter=cfg.get("plate_semi_diameter_mm", 5.0),
        stop_semi_diameter=cfg.get("stop_semi_diameter_mm", 4.0),
    )


def default_system(**overrides) -> OpticalSystem:
    with resources.files("foveastack.data").joinpath("default_system.json").open() as f:
        cfg = json.load(f)
    for k, v in overrides.items():
        cfg[k] = v
    return load_system(cfg)


# ---------------------------------------------------------------------------
# single-ray operations (numpy, spec-facing API)
# ---------------------------------------------------------------------------

def refract_phase_plate(ray: Ray, slopes) -> Ray:
    """Generalized Snell refraction at the thin plate.

    slopes are the dimensionless OPD gradients (same length units in
    numerator and denominator). The ray origin is moved onto the plate
    plane beforehand by the caller.
    """
    if not ray.alive:
        return ray
    a, b, _ = ray.direction
    a2 = a + slopes[0]
    b2 = b + slopes[1]
    s = a2 * a2 + b2 * b2
    if s >= 1.0:
        return replace_ray(ray, alive=False)
    g2 = math.sqrt(1.0 - s)
    return replace_ray(ray, direction=np.array([a2, b2, g2]))


def refract_spherical(ray: Ray, surface: Surface, n1: float, n2: float) -> Ray:
    """Vector-form Snell refraction about the local sphere normal."""
    if not ray.alive:
        return ray
    o = torch.tensor(ray.origin[None, :], dtype=DTYPE)
    d = torch.tensor(ray.direction[None, :], dtype=DTYPE)
    alive = torch.ones(1, dtype=torch.bool)
    o2, d2, alive = _spherical_step(o, d, alive, surface, n1, n2)
    if not bool(alive[0]):
        return replace_ray(ray, alive=False)
    return replace_ray(ray, origin=o2[0].numpy(), direction=d2[0].numpy())


def replace_ray(ray: Ray, **kw) -> Ray:
    return Ray(
        origin=kw.get("origin", ray.origin),
        direction=kw.get("direction", ray.direction),
        wavelength=kw.get("wavelength", ray.wavelength),
        alive=kw.get("alive", ray.alive),
    )


def sample_aperture(system: OpticalSystem, P, rings: int = 6,
                    wavelength: float = 587.6) -> list:
    """Hexapolar ray fan from object point P through the stop plane.

    rings = 0 gives the chief ray only; ring i carries 6*i points.
    """
    origins, dirs = aperture_fan(system, np.asarray(P, float), rings)
    return [Ray(o, d, wavelength) for o, d in zip(origins, dirs)]


def hexapolar_points(radius: float, rings: int) -> np.ndarray:
    pts = [(0.0, 0.0)]
    for i in range(1, rings + 1):
        r = radius * i / rings
        for k in range(6 * i):
            th = 2 * math.pi * k / (6 * i)
            pts.append((r * math.cos(th), r * math.sin(th)))
    return np.asarray(pts)


def aperture_fan(system: OpticalSystem, P: np.ndarray, rings: int):
    """Origins and unit directions aiming P at the stop's hexapolar points."""
    pts = hexapolar_points(system.stop_semi_diameter, rings)
    n = len(pts)
    targets = np.column_stack([pts[:, 0], pts[:, 1],
                               np.full(n, system.stop_z)])
    origins = np.tile(P, (n, 1))
    d = targets - origins
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return origins, d


# ---------------------------------------------------------------------------
# batch tracer (torch)
# ---------------------------------------------------------------------------

def _safe_sqrt(x):
    return torch.sqrt(torch.clamp(x, min=0.0))


def _plane_step(o, d, z_plane):
    t = (z_plane - o[:, 2]) / d[:, 2]
    return o + t.unsqueeze(1) * d


def _phase_plate_step(o, d, alive, surface: Surface, w, aperture_radius,
                      max_order):
    o = _plane_step(o, d, surface.axial_position)
    r2 = o[:, 0] ** 2 + o[:, 1] ** 2
    alive = alive & (r2 <= surface.semi_diameter ** 2 * APERTURE_TOL)
    if w is None:
        return o, d, alive
    u = o[:, 0] / aperture_radius
    v = o[:, 1] / aperture_radius
    gu_mat, gv_mat, expo = _zernike_dense.gradient_matrices(max_order)
    mono = _zernike_dense.monomial_powers(u, v, expo)   # (N, M)
    gu_t = torch.tensor(gu_mat, dtype=o.dtype)
    gv_t = torch.tensor(gv_mat, dtype=o.dtype)
    if w.dim() == 1:
        cu = (w @ gu_t).unsqueeze(0)       # (1, M)
        cv = (w @ gv_t).unsqueeze(0)
    else:                                   # per-ray coefficients (N, K)
        cu = w @ gu_t                       # (N, M)
        cv = w @ gv_t
    sx = (mono * cu).sum(dim=1) / aperture_radius
    sy = (mono * cv).sum(dim=1) / aperture_radius
    a2 = d[:, 0] + SLOPE_SCALE * sx
    b2 = d[:, 1] + SLOPE_SCALE * sy
    s = a2 * a2 + b2 * b2
    alive = alive & (s < 1.0)
    g2 = _safe_sqrt(1.0 - s)
    d = torch.stack([a2, b2, g2], dim=1)
    return o, d, alive


def _spherical_step(o, d, alive, surface: Surface, n1: float, n2: float):
    R = surface.curvature_radius
    zv = surface.axial_position
    center = torch.tensor([0.0, 0.0, zv + R], dtype=o.dtype)
    oc = o - center
    b = (oc * d).sum(dim=1)
    c2 = (oc * oc).sum(dim=1) - R * R
    disc = b * b - c2
    alive = alive & (disc > 0)
    sq = _safe_sqrt(disc)
    t1 = -b - sq
    t2 = -b + sq
    # pick the forward root whose hit lies nearest the vertex plane
    z1 = o[:, 2] + t1 * d[:, 2]
    z2 = o[:, 2] + t2 * d[:, 2]
    ok1 = (t1 > T_EPS)
    ok2 = (t2 > T_EPS)
    use1 = ok1 & (~ok2 | (torch.abs(z1 - zv) <= torch.abs(z2 - zv)))
    t = torch.where(use1, t1, t2)
    alive = alive & (ok1 | ok2)
    p = o + t.unsqueeze(1) * d
    lat2 = p[:, 0] ** 2 + p[:, 1] ** 2
    alive = alive & (lat2 <= surface.semi_diameter ** 2)
    nrm = (p - center) / R
    eta = n1 / n2
    cosi = -(d * nrm).sum(dim=1)
    sin2t = eta * eta * (1.0 - cosi * cosi)
    alive = alive & (sin2t < 1.0)
    cost = _safe_sqrt(1.0 - sin2t)
    d2 = eta * d + (eta * cosi - cost).unsqueeze(1) * nrm
    return p, d2, alive


def trace_batch_torch(system: OpticalSystem, origins, directions,
                      wavelength: float, w=None):
    """Trace a batch of rays at one wavelength.

    origins/directions: (N, 3) torch tensors; w: optional (K,) torch
    tensor of plate coefficients (micrometers), participates in
    autograd. Returns ((N, 2) sensor points in mm, (N,) bool alive).
    """
    o, d = origins, directions
    alive = torch.ones(o.shape[0], dtype=torch.bool)
    max_order = 4 if w is None else _order_from_len(w.shape[-1])
    for surf in system.surfaces:
        if surf.kind == "stop":
            o = _plane_step(o, d, surf.axial_position)
            r2 = o[:, 0] ** 2 + o[:, 1] ** 2
            alive = alive & (r2 <= surf.semi_diameter ** 2 * APERTURE_TOL)
        elif surf.kind == "phase_plate":
            o, d, alive = _phase_plate_step(
                o, d, alive, surf, w, system.plate_semi_diameter, max_order)
        elif surf.kind == "planar_refractor":
            o = _plane_step(o, d, surf.axial_position)
            n1 = refractive_index(surf.material_before, wavelength)
            n2 = refractive_index(surf.material_after, wavelength)
            if n1 != n2:
                eta = n1 / n2
                s = eta * eta * (d[:, 0] ** 2 + d[:, 1] ** 2)
                alive = alive & (s < 1.0)
                d = torch.stack([eta * d[:, 0], eta * d[:, 1],
                                 _safe_sqrt(1.0 - s)], dim=1)
        elif surf.kind == "spherical_refractor":
            n1 = refractive_index(surf.material_before, wavelength)
            n2 = refractive_index(surf.material_after, wavelength)
            o, d, alive = _spherical_step(o, d, alive, surf, n1, n2)
        elif surf.kind == "sensor":
            o = _plane_step(o, d, surf.axial_position)
        else:
            raise ConfigError(f"unknown surface kind {surf.kind!r}")
        alive = alive & (d[:, 2] > 0)
    cx, cy = system.c_img
    p = torch.stack([o[:, 0] + cx, o[:, 1] + cy], dim=1)
    return p, alive


def _order_from_len(k: int) -> int:
    order = int((math.isqrt(8 * k + 1) - 3) // 2)
    while zernike.num_terms(order) < k:
        order += 1
    if zernike.num_terms(order) != k:
        raise ValueError(f"{k} is not a triangular coefficient count")
    return order


def _trace_numpy(system, origins, directions, wavelength, expansion,
                 return_directions=False):
    o = torch.tensor(np.atleast_2d(origins), dtype=DTYPE)
    d = torch.tensor(np.atleast_2d(directions), dtype=DTYPE)
    w = None
    if expansion is not None:
        w = torch.tensor(expansion.coeffs, dtype=DTYPE)
    with torch.no_grad():
        # re-run keeping directions when requested
        if return_directions:
            p, alive = trace_batch_torch(system, o, d, wavelength, w)
            # recover final direction by tracing to a shifted sensor
            shifted = _shift_sensor(system, 1.0)
            p2, _ = trace_batch_torch(shifted, o, d, wavelength, w)
            dxy = p2.numpy() - p.numpy()
            dz = np.ones((len(dxy), 1))
            dirs = np.column_stack([dxy, dz])
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            return p.numpy(), alive.numpy(), dirs
        p, alive = trace_batch_torch(system, o, d, wavelength, w)
    return p.numpy(), alive.numpy()


def _shift_sensor(system: OpticalSystem, dz: float) -> OpticalSystem:
    import copy
    sys2 = copy.copy(system)
    surfs = list(system.surfaces)
    s = surfs[-1]
    surfs[-1] = Surface(s.kind, s.axial_position + dz, s.semi_diameter)
    sys2.surfaces = surfs
    return sys2


def trace(system: OpticalSystem, ray: Ray,
          expansion: ZernikeExpansion | None = None):
    """Sensor-plane intersection of one ray, or None if vignetted."""
    if not ray.alive:
        return None
    p, alive = _trace_numpy(system, ray.origin, ray.direction,
                            ray.wavelength, expansion)
    if not alive[0]:
        return None
    return p[0]


def trace_with_gradient(system: OpticalSystem, ray: Ray,
                        expansion: ZernikeExpansion):
    """Sensor point and its 2xK Jacobian w.r.t. the plate coefficients."""
    if not ray.alive:
        return None, None
    w = torch.tensor(expansion.coeffs, dtype=DTYPE, requires_grad=True)
    o = torch.tensor(ray.origin[None, :], dtype=DTYPE)
    d = torch.tensor(ray.direction[None, :], dtype=DTYPE)
    p, alive = trace_batch_torch(system, o, d, ray.wavelength, w)
    if not bool(alive[0]):
        return None, None
    jac = np.zeros((2, w.shape[0]))
    for i in range(2):
        g, = torch.autograd.grad(p[0, i], w, retain_graph=(i == 0))
        jac[i] = g.numpy()
    return p[0].detach().numpy(), jac


def trace_field_point(system: OpticalSystem, P, expansion=None, rings: int = 6,
                      wavelengths=None):
    """Trace the standard fan for one field point at all design wavelengths.

    Returns (points, alive) with shapes (L, N, 2) and (L, N).
    """
    wavelengths = wavelengths or system.wavelengths
    origins, dirs = aperture_fan(system, np.asarray(P, float), rings)
    pts, alive = [], []
    for lam in wavelengths:
        p, a = _trace_numpy(system, origins, dirs, lam, expansion)
        pts.append(p)
        alive.append(a)
    return np.stack(pts), np.stack(alive)


def chief_ray_sensor_point(system: OpticalSystem, P, expansion=None,
                           wavelength: float = 587.6):
    """Sensor hit of the chief ray (through the stop center)."""
    P = np.asarray(P, float)
    target = np.array([0.0, 0.0, system.stop_z])
    d = target - P
    d = d / np.linalg.norm(d)
    p, alive = _trace_numpy(system, P, d, wavelength, expansion)
    if not alive[0]:
        return None
    return p[0]


def object_point_for_field(system: OpticalSystem, rho: float, theta: float,
                           tol: float = 1e-6):
    """Object point whose chief ray lands at normalized sensor radius rho.

    theta is the azimuth on the sensor; the returned point lies at the
    object depth d_img. Solved by Newton iteration on the chief ray.
    """
    R = system.sensor.half_diagonal_mm
    target = rho * R
    if abs(target) < 1e-12:
        return np.array([0.0, 0.0, system.object_z])
    # signed magnification from a small chief-ray probe (negative: inverted)
    h0 = 1.0
    probe = chief_ray_sensor_point(
        system, np.array([h0, 0.0, system.object_z]))
    m = (probe[0] - system.c_img[0]) / h0
    h = target / m  # signed object height along the theta direction
    P = np.array([h * math.cos(theta), h * math.sin(theta), system.object_z])
    for _ in range(8):
        p = chief_ray_sensor_point(system, P)
        # signed radial landing coordinate along theta
        r = ((p[0] - system.c_img[0]) * math.cos(theta)
             + (p[1] - system.c_img[1]) * math.sin(theta))
        err = r - target
        if abs(err) < tol:
            break
        h -= err / m
        P = np.array([h * math.cos(theta), h * math.sin(theta),
                      system.object_z])
    return P


def field_point_at_angle(system: OpticalSystem, angle_deg: float,
                         azimuth: float = 0.0) -> np.ndarray:
    """Object point at a given oblique angle from the stop center."""
    t = math.tan(math.radians(angle_deg))
    h = system.d_img * t
    return np.array([h * math.cos(azimuth), h * math.sin(azimuth),
                     system.object_z])
