"""Poison-removal transforms."""

import numpy as np
import pytest

from poisonlab import datapipe, defense


def _blur_oracle(img, sigma, radius):
    """Direct 2-D convolution with reflect padding, one pixel at a time."""
    k1 = defense.gaussian_kernel(sigma, radius)
    k2 = np.outer(k1, k1)
    h, w, c = img.shape
    padded = np.pad(img, ((radius, radius), (radius, radius), (0, 0)), mode="reflect")
    out = np.zeros_like(img)
    for i in range(h):
        for j in range(w):
            for ch in range(c):
                acc = 0.0
                for u in range(2 * radius + 1):
                    for v in range(2 * radius + 1):
                        acc += k2[u, v] * padded[i + u, j + v, ch]
                out[i, j, ch] = acc
    return out


def test_kernel_normalized_for_any_sigma():
    for sigma in (0.3, 0.8, 2.5, 10.0):
        for radius in (1, 2, 5):
            k = defense.gaussian_kernel(sigma, radius)
            assert abs(k.sum() - 1.0) < 1e-12
            assert k.shape == (2 * radius + 1,)
            assert np.array_equal(k, k[::-1])


def test_blur_keeps_constant_images():
    img = np.full((5, 7, 3), 0.37)
    out = defense.gaussian_blur(img, sigma=0.8, radius=2)
    assert np.allclose(out, 0.37, atol=1e-12)


def test_blur_impulse_reproduces_kernel():
    sigma, radius = 0.8, 2
    img = np.zeros((9, 9, 1))
    img[4, 4, 0] = 1.0
    out = defense.gaussian_blur(img, sigma, radius)
    k = defense.gaussian_kernel(sigma, radius)
    expected = np.outer(k, k)
    window = out[2:7, 2:7, 0]
    assert np.allclose(window, expected, atol=1e-12)
    assert out.sum() == pytest.approx(1.0, abs=1e-12)


def test_blur_matches_direct_convolution_with_reflect_borders():
    rng = np.random.default_rng(3)
    img = rng.uniform(0.0, 1.0, size=(6, 5, 2))
    for sigma, radius in [(0.8, 2), (1.5, 1)]:
        fast = defense.gaussian_blur(img, sigma, radius)
        slow = _blur_oracle(img, sigma, radius)
        assert np.allclose(fast, slow, atol=1e-12)


def test_blur_preserves_range():
    rng = np.random.default_rng(4)
    img = rng.uniform(0.0, 1.0, size=(8, 8, 3))
    out = defense.gaussian_blur(img)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_bdr_identity_at_eight_bits_on_byte_grid():
    vals = np.arange(256) / 255.0
    img = vals.reshape(16, 16, 1)
    assert np.array_equal(defense.bit_depth_reduce(img, 8), img)


def test_bdr_hand_value():
    img = np.full((1, 1, 1), 0.5)
    assert defense.bit_depth_reduce(img, 2)[0, 0, 0] == pytest.approx(2.0 / 3.0, abs=1e-15)


def test_bdr_level_count_and_range():
    rng = np.random.default_rng(5)
    img = rng.uniform(0.0, 1.0, size=(20, 20, 3))
    for bits in (1, 2, 3, 5):
        out = defense.bit_depth_reduce(img, bits)
        assert len(np.unique(out)) <= 2 ** bits
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_bdr_idempotent_bitwise():
    rng = np.random.default_rng(6)
    img = rng.uniform(0.0, 1.0, size=(10, 10, 3))
    once = defense.bit_depth_reduce(img, 3)
    twice = defense.bit_depth_reduce(once, 3)
    assert np.array_equal(once, twice)


def test_policy_validation():
    with pytest.raises(ValueError):
        defense.DefensePolicy(kind="median")
    with pytest.raises(ValueError):
        defense.DefensePolicy(kind="gaussian-blur", sigma=0.0)
    with pytest.raises(ValueError):
        defense.DefensePolicy(kind="gaussian-blur", radius=0)
    with pytest.raises(ValueError):
        defense.DefensePolicy(kind="bit-depth-reduction", bits=0)
    with pytest.raises(ValueError):
        defense.DefensePolicy(kind="bit-depth-reduction", bits=9)


def test_apply_policy_preserves_metadata():
    rng = np.random.default_rng(7)
    rows = [datapipe.LabeledImage(rng.uniform(0, 1, size=(6, 6, 3)), i % 2, i,
                                  viewpoint=float(i))
            for i in range(8)]
    ds = datapipe.Dataset(rows, 2)
    for policy in (defense.DefensePolicy("gaussian-blur"),
                   defense.DefensePolicy("bit-depth-reduction")):
        out = defense.apply_policy(ds, policy)
        assert out.ids() == ds.ids()
        assert out.labels().tolist() == ds.labels().tolist()
        assert [im.viewpoint for im in out.images] == [im.viewpoint for im in ds.images]
        assert all(a.pixels.shape == b.pixels.shape
                   for a, b in zip(out.images, ds.images))
        assert any(not np.array_equal(a.pixels, b.pixels)
                   for a, b in zip(out.images, ds.images))


def test_apply_policy_none_is_passthrough():
    rows = [datapipe.LabeledImage(np.full((4, 4, 3), 0.5), 0, 0)]
    ds = datapipe.Dataset(rows, 2)
    assert defense.apply_policy(ds, defense.DefensePolicy("none")) is ds
