import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dmtseg.grid import (FormatError, LabelMap, MultiChannelImage, PatchGeometry, ProbabilityMap,
                         argmax_labels, average_maps, decode_mdi, encode_mdi, extract_patch,
                         read_mdi, window_offset, write_mdi)


def naive_patch(plane, center, side):
    h, w = plane.shape
    off = side // 2
    out = np.empty((side, side), plane.dtype)
    for i in range(side):
        for j in range(side):
            r = min(max(center[0] - off + i, 0), h - 1)
            c = min(max(center[1] - off + j, 0), w - 1)
            out[i, j] = plane[r, c]
    return out


def random_probmap(rng, L, h, w):
    return ProbabilityMap.from_unnormalized(rng.random((L, h, w)) + 1e-3)


def test_image_validation():
    with pytest.raises(ValueError):
        MultiChannelImage(np.zeros((2, 3, 4, 5)))
    with pytest.raises(ValueError):
        MultiChannelImage(np.array([[[np.nan]]]))
    img = MultiChannelImage(np.zeros((4, 5)))
    assert img.channels == 1 and img.shape == (4, 5)
    with pytest.raises(ValueError):
        img.data[0, 0, 0] = 1.0


def test_labelmap_range():
    with pytest.raises(ValueError):
        LabelMap(np.array([[0, 4]]), 4)
    assert LabelMap(np.array([[0, 3]]), 4).labels.dtype == np.uint8


def test_probmap_invariants():
    with pytest.raises(ValueError):
        ProbabilityMap(np.full((2, 2, 2), 0.6))
    with pytest.raises(ValueError):
        ProbabilityMap(np.array([[[1.5]], [[-0.5]]]))
    u = ProbabilityMap.uniform(4, (3, 3))
    assert np.allclose(u.values, 0.25)


def test_patch_constant_field():
    img = MultiChannelImage(np.full((1, 6, 7), 5.0))
    assert np.all(extract_patch(img, (3, 2), 3) == 5.0)


def test_patch_single_pixel_image():
    img = MultiChannelImage(np.array([[[2.5]]]))
    p = extract_patch(img, (0, 0), 3)
    assert p.shape == (1, 3, 3) and np.all(p == 2.5)


def test_patch_even_side_ramp():
    ramp = np.arange(16, dtype=np.float32).reshape(4, 4)
    p = extract_patch(MultiChannelImage(ramp), (1, 1), 2)[0]
    # top-left-of-centre: the centre pixel sits at offset (1, 1) in the patch
    assert window_offset(2) == 1
    assert np.array_equal(p, ramp[0:2, 0:2])


def test_patch_outside_raises():
    with pytest.raises(ValueError):
        extract_patch(MultiChannelImage(np.zeros((3, 3))), (3, 0), 3)


def test_patch_matches_naive_oracle(rng):
    for _ in range(1000):
        h, w = rng.integers(1, 12, 2)
        side = int(rng.integers(1, 9))
        plane = rng.random((h, w)).astype(np.float32)
        center = (int(rng.integers(0, h)), int(rng.integers(0, w)))
        got = extract_patch(MultiChannelImage(plane), center, side)[0]
        assert np.array_equal(got, naive_patch(plane, center, side))


def test_argmax_examples(rng):
    pm = ProbabilityMap(np.array([[[0.1]], [[0.9]]]))
    assert argmax_labels(pm).labels[0, 0] == 1
    tie = ProbabilityMap(np.array([[[0.5]], [[0.5]]]))
    assert argmax_labels(tie).labels[0, 0] == 0
    pm = random_probmap(rng, 3, 8, 8)
    lab = argmax_labels(pm).labels
    for r in range(8):
        for c in range(8):
            col = list(pm.values[:, r, c])
            assert lab[r, c] == col.index(max(col))


def test_average_examples(rng):
    pm = random_probmap(rng, 3, 5, 5)
    assert np.allclose(average_maps([pm, pm]).values, pm.values, atol=1e-7)
    a = ProbabilityMap(np.array([[[1.0]], [[0.0]]]))
    b = ProbabilityMap(np.array([[[0.0]], [[1.0]]]))
    assert np.allclose(average_maps([a, b]).values.ravel(), [0.5, 0.5])
    maps = [random_probmap(rng, 4, 6, 5) for _ in range(3)]
    got = average_maps(maps).values
    for idx in np.ndindex(got.shape):
        assert abs(got[idx] - sum(float(m.values[idx]) for m in maps) / 3) < 1e-6


def test_average_errors():
    with pytest.raises(ValueError):
        average_maps([])
    with pytest.raises(ValueError):
        average_maps([ProbabilityMap.uniform(2, (2, 2)), ProbabilityMap.uniform(3, (2, 2))])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(0.0, 1.0)), st.integers(2, 4))
def test_average_is_probability_map(raw, k):
    raw = raw + 1e-6
    maps = [ProbabilityMap.from_unnormalized(np.roll(raw, i, axis=1)) for i in range(k)]
    out = average_maps(maps)
    assert np.abs(out.values.sum(axis=0) - 1).max() <= 1e-6


def test_patch_geometry():
    with pytest.raises(ValueError):
        PatchGeometry(5, 7)


# --- MDI ------------------------------------------------------------------------------

def test_mdi_roundtrip_all_kinds(tmp_path, rng):
    objs = [MultiChannelImage(rng.normal(size=(3, 5, 7))), LabelMap(rng.integers(0, 4, (5, 7)), 4),
            random_probmap(rng, 4, 5, 7)]
    for i, obj in enumerate(objs):
        write_mdi(tmp_path / f"o{i}.mdi", obj)
        back = read_mdi(tmp_path / f"o{i}.mdi")
        assert type(back) is type(obj) and back.digest() == obj.digest()
        assert encode_mdi(back) == encode_mdi(obj)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_mdi_image_roundtrip_property(data):
    img = MultiChannelImage(data)
    assert np.array_equal(decode_mdi(encode_mdi(img)).data, img.data)


def test_mdi_errors():
    buf = encode_mdi(LabelMap(np.zeros((3, 3), int), 2))
    with pytest.raises(FormatError):
        decode_mdi(buf[:-1])
    with pytest.raises(FormatError):
        decode_mdi(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        decode_mdi(buf + b"\0")
    with pytest.raises(FormatError):
        decode_mdi(buf[:5])
