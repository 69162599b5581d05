"""Synthetic capture rendering with spatially varying PSFs.

A scene texture at the object plane is geometrically warped onto the
sensor through the chief-ray magnification, then convolved with PSFs
rendered at a grid of field anchors. The anchor convolutions are
blended bilinearly, which is equivalent to convolving each pixel with
the bilinear interpolation of its surrounding anchor PSFs; that
interpolation is the render's main approximation. No sensor noise is
added unless requested.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy import fft as sfft

from . import optics
from .analysis import psf_render
from .errors import ConfigError, VignettedError
from .optics import OpticalSystem
from .optimize import PatternSet
from .zernike import ZernikeExpansion


@dataclass
class Scene:
    """Planar textured object at a fixed depth.

    texture is RGB in [0, 1] with rows along +y and columns along +x in
    object space; extent_mm is its physical (width, height). An
    optional per-pixel depth map marks multi-plane scenes.
    """

    texture: np.ndarray
    extent_mm: tuple
    depth_mm: float
    depth_map: np.ndarray | None = None

    def __post_init__(self):
        self.texture = np.asarray(self.texture, dtype=float)
        if self.texture.ndim == 2:
            self.texture = np.repeat(self.texture[:, :, None], 3, axis=2)
        if self.texture.ndim != 3 or self.texture.shape[2] != 3:
            raise ConfigError("scene texture must be HxWx3")
        if self.texture.min() < 0.0 or self.texture.max() > 1.0:
            raise ConfigError("scene texture values must lie in [0, 1]")
        self.extent_mm = (float(self.extent_mm[0]), float(self.extent_mm[1]))
        if min(self.extent_mm) <= 0:
            raise ConfigError("scene extent must be positive")
        if self.depth_map is not None:
            self.depth_map = np.asarray(self.depth_map, dtype=float)
            if self.depth_map.shape != self.texture.shape[:2]:
                raise ConfigError("depth map resolution mismatch")

    @property
    def pixel_size_mm(self) -> tuple:
        h, w = self.texture.shape[:2]
        return self.extent_mm[0] / w, self.extent_mm[1] / h

    def save(self, path):
        """PNG texture plus JSON sidecar with the physical metadata."""
        path = Path(path)
        bgr = (np.clip(self.texture[:, :, ::-1], 0, 1) * 65535).astype(np.uint16)
        cv2.imwrite(str(path.with_suffix(".png")), bgr)
        meta = {"extent_mm": list(self.extent_mm), "depth_mm": self.depth_mm}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path) -> "Scene":
        path = Path(path)
        img = cv2.imread(str(path.with_suffix(".png")), cv2.IMREAD_UNCHANGED)
        if img is None:
            raise ConfigError(f"cannot read scene texture {path}")
        scale = 65535.0 if img.dtype == np.uint16 else 255.0
        tex = img[:, :, ::-1].astype(float) / scale
        meta = json.loads(path.with_suffix(".json").read_text())
        return cls(tex, tuple(meta["extent_mm"]), meta["depth_mm"])


@dataclass
class FoveaStack:
    """One render per phase pattern, aligned at a common resolution."""

    images: np.ndarray            # (N, H, W, 3)
    pattern_set: PatternSet
    depth: float
    n_star: np.ndarray | None = None   # optional per-cell winner mask
    pixel_pitch_um: float | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        if self.images.ndim != 4:
            raise ConfigError("stack images must be (N, H, W, 3)")
        if len(self.images) != self.pattern_set.budget:
            raise ConfigError("stack size must match the pattern budget")

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        np.save(out / "stack.npy", self.images)
        for i, img in enumerate(self.images):
            preview = (np.clip(img[:, :, ::-1], 0, 1) * 255).astype(np.uint8)
            cv2.imwrite(str(out / f"image_{i:02d}.png"), preview)
        self.pattern_set.save(out / "patterns.json")
        manifest = {
            "depth_mm": self.depth,
            "pixel_pitch_um": self.pixel_pitch_um,
            "images": [f"image_{i:02d}.png" for i in range(len(self.images))],
            "pattern_index": list(range(len(self.images))),
        }
        (out / "stack_manifest.json").write_text(json.dumps(manifest, indent=2))
        if self.n_star is not None:
            np.save(out / "n_star.npy", self.n_star)

    @classmethod
    def load(cls, out_dir) -> "FoveaStack":
        out = Path(out_dir)
        manifest = json.loads((out / "stack_manifest.json").read_text())
        images = np.load(out / "stack.npy")
        pset = PatternSet.load(out / "patterns.json")
        n_star = None
        if (out / "n_star.npy").exists():
            n_star = np.load(out / "n_star.npy")
        return cls(images, pset, manifest["depth_mm"], n_star,
                   manifest.get("pixel_pitch_um"))


def chief_magnification(system: OpticalSystem) -> float:
    """Signed transverse magnification from a unit chief-ray probe."""
    probe = optics.chief_ray_sensor_point(
        system, np.array([1.0, 0.0, system.object_z]))
    if probe is None:
        raise VignettedError("chief-ray probe vignetted")
    return float(probe[0] - system.c_img[0])


def warp_scene(scene: Scene, system: OpticalSystem, resolution: int,
               pixel_pitch_mm: float) -> np.ndarray:
    """Geometric (aberration-free) image of the scene on the sensor.

    Inverse-maps each sensor pixel to the object plane through the
    chief-ray magnification and c_img, then samples the texture
    bilinearly; points outside the texture read as zero.
    """
    m = chief_magnification(system)
    sx, sy = scene.pixel_size_mm
    th, tw = scene.texture.shape[:2]
    coords = (np.arange(resolution) - (resolution - 1) / 2) * pixel_pitch_mm
    X, Y = np.meshgrid(coords, coords)           # sensor mm
    xo = (X - system.c_img[0]) / m
    yo = (Y - system.c_img[1]) / m
    map_x = (xo / sx + (tw - 1) / 2).astype(np.float32)
    map_y = (yo / sy + (th - 1) / 2).astype(np.float32)
    return cv2.remap(scene.texture, map_x, map_y, cv2.INTER_LINEAR,
                     borderMode=cv2.BORDER_CONSTANT, borderValue=0.0)


def _anchor_psfs(system, expansion, anchors_mm, pitch_um, rays, support):
    """PSFs at the anchor sensor positions; vignetted anchors borrow
    from the nearest valid one."""
    m = chief_magnification(system)
    psfs = [None] * len(anchors_mm)
    for i, (ax, ay) in enumerate(anchors_mm):
        P = np.array([(ax - system.c_img[0]) / m,
                      (ay - system.c_img[1]) / m, system.object_z])
        try:
            psfs[i] = psf_render(system, expansion, P, rays=rays,
                                 pixel_pitch_um=pitch_um, support=support)
        except VignettedError:
            psfs[i] = None
    if all(p is None for p in psfs):
        raise VignettedError("every PSF anchor is vignetted")
    if any(p is None for p in psfs):
        warnings.warn("vignetted PSF anchors substituted from nearest "
                      "valid anchor")
        pos = np.asarray(anchors_mm)
        valid = [i for i, p in enumerate(psfs) if p is not None]
        for i, p in enumerate(psfs):
            if p is None:
                d = np.linalg.norm(pos[valid] - pos[i], axis=1)
                psfs[i] = psfs[valid[int(np.argmin(d))]]
    return psfs


def _bilinear_hats(resolution: int, g: int) -> np.ndarray:
    """(g, resolution) partition-of-unity hat weights for anchor rows."""
    nodes = np.linspace(0, resolution - 1, g)
    x = np.arange(resolution)
    w = np.zeros((g, resolution))
    if g == 1:
        w[0] = 1.0
        return w
    step = nodes[1] - nodes[0]
    for k in range(g):
        w[k] = np.clip(1.0 - np.abs(x - nodes[k]) / step, 0.0, 1.0)
    return w / w.sum(axis=0, keepdims=True)


def render(scene: Scene, system: OpticalSystem,
           expansion: ZernikeExpansion | None = None, psf_grid: int = 9,
           resolution: int | None = None, pixel_pitch_um: float | None = None,
           psf_rays: int = 20_000, psf_support: int = 33,
           noise_sigma: float = 0.0, seed: int | None = None) -> np.ndarray:
    """RGB render of the scene through the system with one plate pattern.

    resolution defaults to the sensor resolution; a smaller value
    renders the same field of view at a proportionally coarser pitch
    unless pixel_pitch_um pins the pitch (then the field of view
    shrinks). Returns (resolution, resolution, 3) float RGB.
    """
    if scene.depth_mm != system.d_img:
        system = system.rebuilt(d_img=scene.depth_mm)
    res = resolution or system.sensor.resolution
    if pixel_pitch_um is None:
        pixel_pitch_um = (system.sensor.pixel_pitch_um
                          * system.sensor.resolution / res)
    pitch_mm = pixel_pitch_um * 1e-3

    geo = warp_scene(scene, system, res, pitch_mm)

    half = (res - 1) / 2 * pitch_mm
    nodes = np.linspace(-half, half, psf_grid)
    anchors = [(x, y) for y in nodes for x in nodes]   # row-major (g*g)
    psfs = _anchor_psfs(system, expansion, anchors, pixel_pitch_um,
                        psf_rays, psf_support)

    # blend anchor convolutions bilinearly; PSF channels are stored
    # blue-to-red so RGB channel c pairs with PSF channel 2-c
    hats = _bilinear_hats(res, psf_grid)
    n = sfft.next_fast_len(res + psf_support - 1)
    lo = (psf_support - 1) // 2
    img_f = [sfft.rfft2(geo[:, :, c], s=(n, n)) for c in range(3)]
    out = np.zeros_like(geo)
    for gy in range(psf_grid):
        for gx in range(psf_grid):
            w2d = np.outer(hats[gy], hats[gx])
            psf = psfs[gy * psf_grid + gx]
            for c in range(3):
                k_f = sfft.rfft2(psf[2 - c], s=(n, n))
                conv = sfft.irfft2(img_f[c] * k_f, s=(n, n))
                out[:, :, c] += w2d * conv[lo:lo + res, lo:lo + res]
    if noise_sigma > 0.0:
        rng = np.random.default_rng(seed)
        out = out + rng.normal(scale=noise_sigma, size=out.shape)
    return out


def render_multi_depth(scene: Scene, system: OpticalSystem,
                       expansion: ZernikeExpansion | None = None,
                       **kw) -> np.ndarray:
    """Per-plane renders composited by the scene's depth mask.

    Each unique depth value is rendered as a full plane and the result
    is assembled by nearest-plane selection; occlusion effects at depth
    edges are out of scope.
    """
    if scene.depth_map is None:
        return render(scene, system, expansion, **kw)
    depths = np.unique(scene.depth_map)
    if len(depths) > 8:
        raise ConfigError("depth map must quantize to at most 8 planes")
    res = kw.get("resolution") or system.sensor.resolution
    out = None
    for d in depths:
        plane_scene = Scene(scene.texture, scene.extent_mm, float(d))
        img = render(plane_scene, system, expansion, **kw)
        sel = (scene.depth_map == d).astype(np.float32)
        sel = cv2.resize(sel, (res, res), interpolation=cv2.INTER_NEAREST)
        out = img * sel[:, :, None] if out is None \
            else out + img * sel[:, :, None]
    return out


def render_stack(scene: Scene, system: OpticalSystem,
                 pattern_set: PatternSet, n_star: np.ndarray | None = None,
                 **kw) -> FoveaStack:
    """One render per pattern in the set, in pattern order."""
    if pattern_set.depth != scene.depth_mm:
        warnings.warn("pattern set was optimized at a different depth "
                      f"({pattern_set.depth} mm vs {scene.depth_mm} mm)")
    images = np.stack([render(scene, system, p, **kw)
                       for p in pattern_set.patterns])
    res = kw.get("resolution") or system.sensor.resolution
    pitch = kw.get("pixel_pitch_um") or (
        system.sensor.pixel_pitch_um * system.sensor.resolution / res)
    return FoveaStack(images, pattern_set, scene.depth_mm, n_star, pitch)


def checkerboard_scene(depth_mm: float, extent_mm: float = 80.0,
                       squares: int = 12, pixels: int = 960) -> Scene:
    """High-contrast checkerboard target for calibration runs."""
    cell = pixels // squares
    i, j = np.indices((pixels, pixels))
    board = (((i // cell) + (j // cell)) % 2).astype(float)
    tex = np.repeat(board[:, :, None], 3, axis=2)
    return Scene(tex, (extent_mm, extent_mm), depth_mm)


def text_scene(depth_mm: float, extent_mm: float = 80.0,
               pixels: int = 960, seed: int = 0) -> Scene:
    """Textured target with structure at many scales.

    Random glyph-like rectangles and lines on a mid-gray background;
    deterministic under seed.
    """
    rng = np.random.default_rng(seed)
    img = np.full((pixels, pixels), 0.5)
    for _ in range(400):
        x, y = rng.integers(0, pixels, 2)
        w, h = rng.integers(2, pixels // 8, 2)
        val = rng.uniform(0, 1)
        img[y:y + h, x:x + w] = val
    img = cv2.GaussianBlur(img, (3, 3), 0.7)
    tex = np.repeat(img[:, :, None], 3, axis=2)
    return Scene(np.clip(tex, 0, 1), (extent_mm, extent_mm), depth_mm)
