import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dmtseg.features import (FeatureConfig, clear_caches, gabor_kernel, patch_feature_maps, patch_features,
                             patch_layout, superpixel_feature_matrix, superpixel_features, superpixel_layout)
from dmtseg.grid import MultiChannelImage, ProbabilityMap
from dmtseg.oversegment import SlicParams, slic

CFG = FeatureConfig()
DERIVATIVE = ("sobel", "gradient", "laplacian", "dog_1_2", "mean_curvature", "gaussian_curvature")


def channel_stats(fv, ch=0):
    prefix = f"ch{ch}:"
    return {n[len(prefix):]: fv[n] for n in fv.layout if n.startswith(prefix)}


def test_layout_sizes_and_purity():
    a = patch_layout(CFG, 3)
    assert a == patch_layout(FeatureConfig(), 3)
    assert len(a) == 74 and len(set(a)) == 74
    ctx = patch_layout(CFG.with_context(True), 3)
    assert len(ctx) == 82 and ctx[:74] == a
    assert len(superpixel_layout(CFG.with_context(True), 3)) == 78


def test_gabor_kernel_is_zero_mean():
    k = gabor_kernel(4.0, np.pi / 4)
    assert abs(k.sum()) < 1e-9


def test_constant_patch():
    img = MultiChannelImage(np.full((1, 20, 20), 0.7))
    s = channel_stats(patch_features(img, None, (9, 9), 5, CFG))
    c = np.float32(0.7)
    for name in ("mean", "max", "min", "median"):
        assert s[name] == pytest.approx(c, abs=1e-7)
    for name in ("std", "entropy", "skewness", "kurtosis") + DERIVATIVE:
        assert s[name] == 0.0


def test_mirror_symmetric_patch_has_zero_symmetry(rng):
    half = rng.random((16, 8))
    plane = np.concatenate([half, half[:, ::-1]], axis=1)
    fv = patch_features(MultiChannelImage(plane), None, (8, 8), 4, CFG)
    assert fv["ch0:symmetry"] == pytest.approx(0.0, abs=1e-7)


def test_ramp_gradient_and_laplacian():
    plane = np.tile(np.arange(5, dtype=np.float64), (5, 1))  # I(x, y) = x
    s = channel_stats(patch_features(MultiChannelImage(plane), None, (2, 2), 5, CFG))
    assert s["gradient"] == pytest.approx(1.0, abs=1e-6)
    assert s["laplacian"] == pytest.approx(0.0, abs=1e-6)


def test_single_pixel_set(rng):
    img = MultiChannelImage(rng.random((2, 10, 10)))
    fv = superpixel_features(img, None, [(3, 4)], CFG)
    s = channel_stats(fv, 1)
    assert s["mean"] == pytest.approx(img.data[1, 3, 4]) and s["std"] == 0.0


def test_whole_image_constant_set():
    img = MultiChannelImage(np.full((1, 9, 13), 2.0))
    coords = np.argwhere(np.ones((9, 13), bool))
    fv = superpixel_features(img, None, coords, CFG)
    assert fv["ch0:entropy"] == 0.0
    assert fv["proj_x"] == pytest.approx(0.5) and fv["proj_y"] == pytest.approx(0.5)


def test_random_set_moments_match_loop_oracle(rng):
    img = MultiChannelImage(rng.random((1, 16, 16)))
    flat = rng.choice(256, 50, replace=False)
    coords = np.stack(np.divmod(flat, 16), axis=1)
    s = channel_stats(superpixel_features(img, None, coords, CFG))
    vals = [float(img.data[0, r, c]) for r, c in coords]
    n = len(vals)
    mean = sum(vals) / n
    m2 = sum((v - mean) ** 2 for v in vals) / n
    m3 = sum((v - mean) ** 3 for v in vals) / n
    m4 = sum((v - mean) ** 4 for v in vals) / n
    srt = sorted(vals)
    assert s["mean"] == pytest.approx(mean, abs=1e-9)
    assert s["std"] == pytest.approx(m2 ** 0.5, abs=1e-9)
    assert s["skewness"] == pytest.approx(m3 / m2 ** 1.5, abs=1e-9)
    assert s["kurtosis"] == pytest.approx(m4 / m2 ** 2 - 3, abs=1e-9)
    assert s["median"] == pytest.approx((srt[24] + srt[25]) / 2, abs=1e-9)
    assert (s["max"], s["min"]) == (max(vals), min(vals))


@pytest.mark.parametrize("side", [1, 4, 5, 10])
def test_dense_maps_match_point_route(rng, side):
    clear_caches()
    img = MultiChannelImage(rng.random((2, 23, 19)))
    ctx = ProbabilityMap.from_unnormalized(rng.random((4, 23, 19)) + 0.01)
    cfg = CFG.with_context(True)
    dense = patch_feature_maps(img, ctx, side, cfg)
    for _ in range(25):
        r, c = int(rng.integers(0, 23)), int(rng.integers(0, 19))
        point = patch_features(img, ctx, (r, c), side, cfg).values
        np.testing.assert_allclose(dense[:, r, c], point, rtol=2e-5, atol=2e-5)


def test_superpixel_matrix_matches_per_set_route(rng):
    img = MultiChannelImage(rng.random((2, 24, 24)))
    em = slic(img, 0, SlicParams(target_superpixels=20))
    ctx = ProbabilityMap.from_unnormalized(rng.random((4, 24, 24)) + 0.01)
    cfg = CFG.with_context(True)
    mat = superpixel_feature_matrix(img, em.assignment, em.edges, ctx, cfg)
    for s, flat in enumerate(em.pixel_sets):
        coords = np.stack(np.divmod(flat, 24), axis=1)
        nbrs = [t for a, b in em.edges for t in ((b,) if a == s else (a,) if b == s else ())]
        own = [float(img.data[ch][tuple(coords.T)].mean()) for ch in range(2)]
        nb = [np.mean([img.data[ch][em.assignment == t].astype(np.float64).mean() for t in nbrs])
              if nbrs else own[ch] for ch in range(2)]
        ref = superpixel_features(img, ctx, coords, cfg, neighbor_means=nb).values
        np.testing.assert_allclose(mat[s], ref, rtol=1e-6, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from([1.0, -3.0, 10.0]))
def test_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    base = np.round(rng.random((1, 14, 14)) * 64) / 64
    a = channel_stats(patch_features(MultiChannelImage(base), None, (7, 6), 6, CFG))
    b = channel_stats(patch_features(MultiChannelImage(base + shift), None, (7, 6), 6, CFG))
    for name in ("std", "entropy", "skewness", "kurtosis") + DERIVATIVE:
        assert b[name] == pytest.approx(a[name], abs=1e-5)
    for name in ("mean", "max", "min", "median"):
        assert b[name] == pytest.approx(a[name] + shift, abs=1e-5)


def test_gabor_sign_flip(rng):
    plane = rng.normal(size=(20, 20))
    plane -= plane.mean()
    a = patch_features(MultiChannelImage(plane), None, (10, 10), 8, CFG)
    b = patch_features(MultiChannelImage(-plane), None, (10, 10), 8, CFG)
    for name in a.layout:
        if "gabor" in name:
            assert b[name] == pytest.approx(a[name], rel=1e-5, abs=1e-7)


def test_context_entries(rng):
    img = MultiChannelImage(rng.random((1, 12, 12)))
    ctx = ProbabilityMap.from_unnormalized(rng.random((4, 12, 12)) + 0.01)
    fv = patch_features(img, ctx, (5, 5), 3, CFG.with_context(True))
    assert fv["ctx2:center"] == pytest.approx(ctx.values[2, 5, 5])
    assert fv["ctx2:mean"] == pytest.approx(ctx.values[2, 4:7, 4:7].mean(), abs=1e-6)
    with pytest.raises(ValueError):
        patch_features(img, ProbabilityMap.uniform(4, (5, 5)), (1, 1), 3, CFG.with_context(True))
