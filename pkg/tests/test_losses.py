import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bladapt import tensor as T
from bladapt.losses import (
    SmoothnessContext,
    adaptive_denoise_loss,
    neighbour_weights,
    rgb_to_yuv,
    smoothness_term,
    supervised_loss,
    unsupervised_loss,
)


def test_supervised_zero_and_unit_offset():
    z = np.random.default_rng(0).uniform(0, 1, (2, 3, 4, 4))
    assert supervised_loss(z, z).item() == 0.0
    assert supervised_loss(z + 1.0, z).item() == pytest.approx(1.0, abs=1e-15)


def test_supervised_matches_two_pass_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(0, 1, (2, 3, 5, 5)), rng.uniform(0, 1, (2, 3, 5, 5))
    total = 0.0
    for va, vb in zip(a.ravel(), b.ravel()):
        total += (float(va) - float(vb)) ** 2
    assert abs(supervised_loss(a, b).item() - total / a.size) <= 1e-7


def test_supervised_shape_mismatch():
    with pytest.raises(T.DimensionError):
        supervised_loss(np.zeros((1, 3, 2, 2)), np.zeros((1, 3, 2, 3)))


@pytest.mark.parametrize(
    "rgb, yuv",
    [((0, 0, 0), (0, 0, 0)), ((1, 1, 1), (1, 0, 0)), ((1, 0, 0), (0.299, -0.168736, 0.5))],
)
def test_rgb_to_yuv_reference_colours(rgb, yuv):
    img = np.broadcast_to(np.array(rgb, dtype=np.float64).reshape(1, 3, 1, 1), (1, 3, 2, 2))
    out = rgb_to_yuv(img).data[0, :, 0, 0]
    np.testing.assert_allclose(out, yuv, atol=1e-12)


def test_unsupervised_constant_image_is_zero():
    y = np.full((1, 3, 4, 4), 0.3)
    assert unsupervised_loss(y, y).item() == 0.0


def test_unsupervised_nonconstant_has_only_smoothness():
    y = np.random.default_rng(2).uniform(0, 1, (1, 3, 4, 4))
    ctx = SmoothnessContext()
    total = unsupervised_loss(y, y, ctx).item()
    assert total > 0
    assert total == pytest.approx(smoothness_term(y, y, ctx).item(), rel=1e-12)


def scalar_smoothness(x, y, sigma):
    """Sum over pixels i and 4-neighbours j of w_ij |x_i - x_j|, per pixel, single channel guidance."""
    _, _, H, W = x.shape
    total = 0.0
    for i in range(H):
        for j in range(W):
            for di, dj in ((0, 1), (0, -1), (1, 0), (-1, 0)):
                a, b = i + di, j + dj
                if 0 <= a < H and 0 <= b < W:
                    w = math.exp(-((y[0, 0, i, j] - y[0, 0, a, b]) ** 2) / (2 * sigma ** 2))
                    total += w * abs(x[0, 0, i, j] - x[0, 0, a, b])
    return total / (H * W)


def test_two_by_two_toy_matches_scalar_loop():
    x = np.array([[[[0.2, 0.5], [0.9, 0.4]]]])
    y = np.array([[[[0.1, 0.15], [0.3, 0.12]]]])
    ctx = SmoothnessContext(sigma=0.1)
    # handworked: pairs (0,1),(0,2),(1,3),(2,3) each counted twice
    w = lambda p, q: math.exp(-((p - q) ** 2) / 0.02)
    hand = 2 * (w(0.1, 0.15) * 0.3 + w(0.1, 0.3) * 0.7 + w(0.15, 0.12) * 0.1 + w(0.3, 0.12) * 0.5) / 4
    assert abs(smoothness_term(x, y, ctx).item() - hand) <= 1e-7
    assert abs(smoothness_term(x, y, ctx).item() - scalar_smoothness(x, y, 0.1)) <= 1e-7


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 5), st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_smoothness_matches_scalar_loop_property(h, w, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(0, 1, (1, 1, h, w)), rng.uniform(0, 1, (1, 1, h, w))
    assert abs(smoothness_term(x, y, SmoothnessContext()).item() - scalar_smoothness(x, y, 0.1)) <= 1e-7


def test_weights_are_in_unit_interval():
    y = np.random.default_rng(3).uniform(0, 1, (2, 3, 6, 6))
    wh, wv = neighbour_weights(y, SmoothnessContext())
    assert wh.shape == (2, 1, 6, 5) and wv.shape == (2, 1, 5, 6)
    assert np.all((wh > 0) & (wh <= 1)) and np.all((wv > 0) & (wv <= 1))


def test_context_validation():
    with pytest.raises(ValueError):
        SmoothnessContext(sigma=0)
    with pytest.raises(ValueError):
        SmoothnessContext(fidelity_weight=-1)


def test_denoise_loss_examples():
    gt = np.zeros((2, 3, 4, 4))
    assert adaptive_denoise_loss(gt, gt, gt, gt).item() == 0.0
    a = np.full((2, 3, 4, 4), np.sqrt(0.1))
    assert adaptive_denoise_loss(a, gt, None, None).item() == pytest.approx(0.1)
    b = np.full((2, 3, 4, 4), np.sqrt(0.3))
    assert adaptive_denoise_loss(a, gt, b, gt).item() == pytest.approx(0.4)


def test_denoise_loss_needs_a_group():
    with pytest.raises(ValueError):
        adaptive_denoise_loss(None, None, None, None)
    with pytest.raises(ValueError):
        adaptive_denoise_loss(np.zeros((1, 3, 2, 2)), None)
