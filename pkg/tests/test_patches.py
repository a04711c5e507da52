import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcgp.errors import DimensionMismatch, PatchTooLarge
from dcgp.patches import PatchConfig, Shape3, extract_patches, fold_responses, output_shape


def test_output_shape_examples():
    assert output_shape((28, 28, 1), PatchConfig(5, 5, 1), 10) == Shape3(24, 24, 10)
    assert output_shape((24, 24, 10), PatchConfig(5, 5, 1), 10) == Shape3(20, 20, 10)
    assert output_shape((32, 32, 3), PatchConfig(4, 4, 2), 10) == Shape3(15, 15, 10)
    assert output_shape((5, 5, 1), PatchConfig(5, 5, 1), 1) == Shape3(1, 1, 1)
    assert output_shape((28, 28, 1), PatchConfig(5, 5, 2), 10) == Shape3(12, 12, 10)


def test_patch_too_large():
    with pytest.raises(PatchTooLarge):
        output_shape((4, 4, 1), PatchConfig(5, 5, 1), 1)
    with pytest.raises(PatchTooLarge):
        extract_patches(np.zeros((4, 6, 1)), PatchConfig(5, 5, 1))


def test_invalid_stride():
    with pytest.raises(ValueError):
        PatchConfig(3, 3, 0)


def test_mnist_patch_counts(rng):
    P = extract_patches(rng.standard_normal((28, 28, 1)), PatchConfig(5, 5, 1))
    assert P.shape == (576, 25)


def test_unit_patches_enumerate_pixels():
    img = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
    np.testing.assert_array_equal(extract_patches(img, PatchConfig(1, 1, 1)), [[1], [2], [3], [4]])


def test_2x2_patch_order():
    a = np.arange(1.0, 10.0).reshape(3, 3, 1)
    P = extract_patches(a, PatchConfig(2, 2, 1))
    assert P.shape == (4, 4)
    np.testing.assert_array_equal(P[0], [1, 2, 4, 5])
    np.testing.assert_array_equal(P[3], [5, 6, 8, 9])


def test_channel_fastest():
    img = np.arange(2 * 2 * 3, dtype=float).reshape(2, 2, 3)
    P = extract_patches(img, PatchConfig(2, 2, 1))
    np.testing.assert_array_equal(P[0], img.reshape(-1))


def test_fold_examples():
    np.testing.assert_array_equal(fold_responses([[7.0]], Shape3(1, 1, 1)), [[[7.0]]])
    out = fold_responses(np.array([1.0, 2.0, 3.0, 4.0])[:, None], Shape3(2, 2, 1))
    np.testing.assert_array_equal(out[..., 0], [[1, 2], [3, 4]])
    with pytest.raises(DimensionMismatch):
        fold_responses(np.ones((3, 1)), Shape3(2, 2, 1))


def test_batch_matches_single(rng):
    imgs = rng.standard_normal((3, 9, 8, 2))
    cfg = PatchConfig(3, 2, 2)
    batch = extract_patches(imgs, cfg)
    for i in range(3):
        np.testing.assert_array_equal(batch[i], extract_patches(imgs[i], cfg))


@settings(max_examples=60, deadline=None)
@given(H=st.integers(1, 12), W=st.integers(1, 12), C=st.integers(1, 3), ph=st.integers(1, 5), pw=st.integers(1, 5),
       stride=st.integers(1, 3), seed=st.integers(0, 1000))
def test_patches_are_slices(H, W, C, ph, pw, stride, seed):
    if ph > H or pw > W:
        return
    r = np.random.default_rng(seed)
    img = r.standard_normal((H, W, C))
    cfg = PatchConfig(ph, pw, stride)
    out = output_shape((H, W, C), cfg, 1)
    P = extract_patches(img, cfg)
    assert P.shape == (out.height * out.width, ph * pw * C)
    p = int(r.integers(P.shape[0]))
    i, j = divmod(p, out.width)
    np.testing.assert_array_equal(P[p], img[i * stride:i * stride + ph, j * stride:j * stride + pw].reshape(-1))


@settings(max_examples=30, deadline=None)
@given(H=st.integers(1, 10), W=st.integers(1, 10), seed=st.integers(0, 1000))
def test_unit_patch_round_trip(H, W, seed):
    img = np.random.default_rng(seed).standard_normal((H, W, 1))
    P = extract_patches(img, PatchConfig(1, 1, 1))
    np.testing.assert_array_equal(fold_responses(P, Shape3(H, W, 1)), img)
