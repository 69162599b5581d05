import numpy as np
import pytest

from foveastack import fusion


def _blur(img, sigma):
    import cv2
    return cv2.GaussianBlur(img, (0, 0), sigma)


@pytest.fixture(scope="module")
def split_stack(rng=np.random.default_rng(42)):
    """Two images sharp on opposite halves of a random texture."""
    sharp = rng.uniform(size=(64, 64, 3))
    blurred = _blur(sharp, 3.0)
    left = sharp.copy()
    left[:, 32:] = blurred[:, 32:]
    right = sharp.copy()
    right[:, :32] = blurred[:, :32]
    return sharp, np.stack([left, right])


def test_sharpness_map_orders_blur(rng):
    img = rng.uniform(size=(64, 64, 3))
    s_sharp = fusion.sharpness_map(img, blur_radius=5).mean()
    s_blur = fusion.sharpness_map(_blur(img, 2.0), blur_radius=5).mean()
    assert s_sharp > 2.0 * s_blur


def test_sharpness_map_constant_is_zero():
    assert fusion.sharpness_map(np.full((32, 32, 3), 0.7)).max() == 0.0


def test_fuse_sharpness_beats_inputs(split_stack):
    sharp, stack = split_stack
    fused, index_map = fusion.fuse_sharpness(stack, blur_radius=5)
    p_fused = fusion.metrics(fused, sharp)["psnr_db"]
    p_each = [fusion.metrics(im, sharp)["psnr_db"] for im in stack]
    assert p_fused > max(p_each) + 2.0
    # the winner map tracks the sharp halves away from the seam
    assert (index_map[:, :20] == 0).mean() > 0.9
    assert (index_map[:, -20:] == 1).mean() > 0.9


def test_fuse_sharpness_uniform_where_flat():
    a = np.full((32, 32, 3), 0.2)
    b = np.full((32, 32, 3), 0.8)
    fused, _ = fusion.fuse_sharpness(np.stack([a, b]))
    assert np.allclose(fused, 0.5)


def test_fuse_mask_exact_selection(split_stack):
    sharp, stack = split_stack
    n_star = np.zeros((64, 64), int)
    n_star[:, 32:] = 1
    fused = fusion.fuse_mask(stack, n_star)
    assert np.array_equal(fused, sharp)


def test_fuse_mask_upsamples_and_validates(split_stack):
    _, stack = split_stack
    coarse = np.zeros((4, 4), int)
    coarse[:, 2:] = 1
    fused = fusion.fuse_mask(stack, coarse)
    assert np.array_equal(fused[:, :32], stack[0][:, :32])
    assert np.array_equal(fused[:, 32:], stack[1][:, 32:])
    with pytest.raises(ValueError):
        fusion.fuse_mask(stack, np.full((4, 4), 2))


def test_fuse_pyramid_beats_inputs(split_stack):
    sharp, stack = split_stack
    fused = fusion.fuse_pyramid(stack, levels=4)
    p_fused = fusion.metrics(np.clip(fused, 0, 1), sharp)["psnr_db"]
    p_each = [fusion.metrics(im, sharp)["psnr_db"] for im in stack]
    assert p_fused > max(p_each)


def test_fuse_pyramid_validates():
    stack = np.zeros((2, 16, 16, 3))
    with pytest.raises(ValueError):
        fusion.fuse_pyramid(stack, levels=6)
    with pytest.raises(ValueError):
        fusion.fuse_pyramid(stack, levels=0)


def test_stack_validation():
    with pytest.raises(ValueError):
        fusion.fuse_sharpness(np.zeros((1, 8, 8, 3)))
    with pytest.raises(ValueError):
        fusion.fuse_sharpness(np.zeros((8, 8)))


def test_grayscale_stack_round_trips(rng):
    stack = rng.uniform(size=(2, 32, 32))
    fused, _ = fusion.fuse_sharpness(stack)
    assert fused.shape == (32, 32)
    fused = fusion.fuse_mask(stack, np.zeros((32, 32), int))
    assert fused.shape == (32, 32)


def test_metrics_identity_and_cap(rng):
    img = rng.uniform(size=(32, 32, 3))
    out = fusion.metrics(img, img)
    assert out["psnr_db"] == fusion.PSNR_CAP_DB
    assert out["ssim"] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        fusion.metrics(img, img[:16])


def test_metrics_known_mse():
    a = np.zeros((32, 32))
    b = np.full((32, 32), 0.1)
    out = fusion.metrics(a, b)
    assert out["psnr_db"] == pytest.approx(20.0)  # -10 log10(0.01)
