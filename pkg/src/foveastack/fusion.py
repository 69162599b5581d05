"""Stack fusion: sharpness-weighted averaging, mask selection, and a
Laplacian-pyramid baseline, plus PSNR/SSIM metrics.

Sharpness is the absolute 4-neighbor Laplacian of the luminance,
smoothed by a Gaussian whose radius should exceed the PSF support.
Images are expected aligned (renders share the warp), so there is no
registration stage.
"""

from __future__ import annotations

import numpy as np
import cv2
from skimage.metrics import structural_similarity

PSNR_CAP_DB = 99.0

# relative luminance weights for RGB channel order
LUMA_WEIGHTS_RGB = (0.2126, 0.7152, 0.0722)

DEFAULT_BLUR_RADIUS = 15


def _luminance(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        return img
    return np.tensordot(img, np.asarray(LUMA_WEIGHTS_RGB), axes=(2, 0))


def _check_stack(images) -> np.ndarray:
    stack = np.asarray(images, dtype=float)
    if stack.ndim == 3:
        stack = stack[:, :, :, None]
    if stack.ndim != 4:
        raise ValueError("stack must be (N, H, W[, C])")
    if len(stack) < 2:
        raise ValueError("fusion needs at least 2 images")
    return stack


def sharpness_map(image: np.ndarray,
                  blur_radius: int = DEFAULT_BLUR_RADIUS) -> np.ndarray:
    """|Laplacian| of the luminance blurred to a local sharpness field."""
    luma = _luminance(image)
    lap = cv2.Laplacian(luma, cv2.CV_64F, ksize=1)   # 4-neighbor kernel
    s = np.abs(lap)
    if blur_radius > 0:
        k = 2 * blur_radius + 1
        s = cv2.GaussianBlur(s, (k, k), blur_radius / 2.0)
    return s


def fuse_sharpness(images, blur_radius: int = DEFAULT_BLUR_RADIUS):
    """Sharpness-weighted average of an aligned stack.

    Weights are the per-image sharpness maps normalized pixelwise to
    sum to one (uniform where all maps vanish). Returns (fused image,
    argmax index map).
    """
    stack = _check_stack(images)
    n = len(stack)
    maps = np.stack([sharpness_map(img if img.shape[-1] != 1 else img[:, :, 0],
                                   blur_radius) for img in stack])
    total = maps.sum(axis=0)
    flat = total <= 0
    weights = np.where(flat[None], 1.0 / n, maps / np.where(flat, 1.0, total))
    fused = (weights[:, :, :, None] * stack).sum(axis=0)
    index_map = maps.argmax(axis=0)
    out = fused[:, :, 0] if np.asarray(images).ndim == 3 else fused
    return out, index_map


def fuse_mask(images, n_star: np.ndarray) -> np.ndarray:
    """Pixel-wise selection by a pre-optimized winner mask.

    The mask is upsampled to image resolution by nearest neighbor.
    """
    stack = _check_stack(images)
    n, h, w = stack.shape[:3]
    mask = np.asarray(n_star)
    if mask.min() < 0 or mask.max() >= n:
        raise ValueError("mask index out of range")
    if mask.shape != (h, w):
        mask = cv2.resize(mask.astype(np.int32), (w, h),
                          interpolation=cv2.INTER_NEAREST)
    ii, jj = np.indices((h, w))
    fused = stack[mask, ii, jj]
    return fused[:, :, 0] if np.asarray(images).ndim == 3 else fused


def fuse_pyramid(images, levels: int = 5,
                 blur_radius: int = 2) -> np.ndarray:
    """Laplacian-pyramid fusion with per-level max-sharpness selection."""
    stack = _check_stack(images)
    n, h, w = stack.shape[:3]
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if min(h, w) < 2 ** levels:
        raise ValueError(f"{h}x{w} image too small for {levels} levels")
    pyramids = [_laplacian_pyramid(img, levels) for img in stack]
    fused_levels = []
    for lvl in range(levels + 1):
        coeffs = np.stack([p[lvl] for p in pyramids])   # (N, h, w, C)
        if lvl < levels:
            energy = np.stack([
                cv2.GaussianBlur(np.abs(c).mean(axis=2),
                                 (2 * blur_radius + 1,) * 2, blur_radius)
                for c in coeffs])
        else:
            # base level: reuse full-resolution sharpness, downsampled
            energy = np.stack([
                cv2.resize(sharpness_map(img if img.shape[-1] != 1
                                         else img[:, :, 0]),
                           coeffs.shape[2:0:-1])
                for img in stack])
        pick = energy.argmax(axis=0)
        ii, jj = np.indices(pick.shape)
        fused_levels.append(coeffs[pick, ii, jj])
    fused = _pyramid_reconstruct(fused_levels)
    return fused[:, :, 0] if np.asarray(images).ndim == 3 else fused


def _laplacian_pyramid(img: np.ndarray, levels: int) -> list:
    gauss = [img]
    for _ in range(levels):
        gauss.append(cv2.pyrDown(gauss[-1]))
    out = []
    for i in range(levels):
        up = cv2.pyrUp(gauss[i + 1], dstsize=gauss[i].shape[1::-1])
        out.append(_as3d(gauss[i]) - _as3d(up))
    out.append(_as3d(gauss[levels]))
    return out


def _pyramid_reconstruct(levels: list) -> np.ndarray:
    img = levels[-1]
    for lap in levels[-2::-1]:
        up = _as3d(cv2.pyrUp(img, dstsize=lap.shape[1::-1]))
        img = up + lap
    return img


def _as3d(a: np.ndarray) -> np.ndarray:
    return a[:, :, None] if a.ndim == 2 else a


def metrics(fused: np.ndarray, reference: np.ndarray,
            data_range: float = 1.0) -> dict:
    """PSNR (dB, capped) and SSIM against an aligned reference."""
    a = np.asarray(fused, dtype=float)
    b = np.asarray(reference, dtype=float)
    if a.shape != b.shape:
        raise ValueError("size mismatch between fused and reference")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        psnr = PSNR_CAP_DB
    else:
        psnr = min(10.0 * np.log10(data_range ** 2 / mse), PSNR_CAP_DB)
    kw = dict(win_size=11, gaussian_weights=True, sigma=1.5,
              use_sample_covariance=False, data_range=data_range)
    if a.ndim == 3:
        kw["channel_axis"] = 2
    ssim = float(structural_similarity(a, b, **kw))
    return {"psnr_db": float(psnr), "ssim": ssim}
