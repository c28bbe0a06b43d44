import numpy as np
import pytest
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from skimage.measure import label as cc_label

from dmtseg.grid import LabelMap, MultiChannelImage
from dmtseg.oversegment import SlicParams, apply_partition, build_edge_map, majority_label, slic


def check_edge_map(em):
    a = em.assignment
    n = em.n_superpixels
    assert n >= 1 and set(np.unique(a)) == set(range(n))
    for s in range(n):
        assert cc_label(a == s, connectivity=1).max() == 1, f"superpixel {s} is not 4-connected"
    # edges: unique, ordered, and exactly the 4-adjacent differing pairs
    pairs = set()
    for x, y in ((a[:, :-1], a[:, 1:]), (a[:-1], a[1:])):
        m = x != y
        pairs |= {(min(p, q), max(p, q)) for p, q in zip(x[m], y[m])}
    got = [tuple(e) for e in em.edges]
    assert len(got) == len(set(got)) and set(got) == pairs
    assert all(p < q for p, q in got)
    if n > 1:
        e = np.asarray(em.edges)
        g = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
        assert connected_components(g, directed=False)[0] == 1


def isoperimetric(em):
    a = em.assignment
    per = np.zeros(em.n_superpixels)
    for x, y in ((a[:, :-1], a[:, 1:]), (a[:-1], a[1:])):
        m = x != y
        np.add.at(per, x[m], 1)
        np.add.at(per, y[m], 1)
    return float(np.mean(per ** 2 / em.sizes))


def test_constant_image_target_4():
    em = slic(MultiChannelImage(np.zeros((1, 64, 64))), 0, SlicParams(target_superpixels=4))
    assert em.n_superpixels == 4
    assert np.all(np.abs(em.sizes - 1024) <= 0.3 * 1024)
    check_edge_map(em)


def test_target_one():
    em = slic(MultiChannelImage(np.random.default_rng(0).random((1, 20, 30))), 0,
              SlicParams(target_superpixels=1))
    assert em.n_superpixels == 1 and em.n_edges == 0


def test_two_tone_boundary():
    plane = np.zeros((32, 32))
    plane[:, 16:] = 1.0
    em = slic(MultiChannelImage(plane), 0, SlicParams(target_superpixels=2, compactness=1.0))
    assert em.n_superpixels == 2
    aligned = sum(np.flatnonzero(np.diff(row) != 0).tolist() == [15] for row in em.assignment)
    assert aligned >= 0.95 * 32


@pytest.mark.parametrize("target", [30, 200, 1000])
def test_partition_invariants_on_noise(rng, target):
    em = slic(MultiChannelImage(rng.random((2, 40, 48))), 0, SlicParams(target_superpixels=target))
    check_edge_map(em)
    assert em.sizes.sum() == 40 * 48


def test_count_band_on_smooth_image():
    yy, xx = np.mgrid[0:64, 0:64]
    plane = np.sin(xx / 9.0) + np.cos(yy / 7.0) + 0.05 * np.random.default_rng(3).normal(size=(64, 64))
    for target in (50, 200, 1000):
        n = slic(MultiChannelImage(plane), 0, SlicParams(target_superpixels=target)).n_superpixels
        assert 0.5 * target <= n <= 1.5 * target


def test_raster_order_ids(rng):
    em = slic(MultiChannelImage(rng.random((1, 30, 30))), 0, SlicParams(target_superpixels=40))
    flat = em.assignment.ravel()
    _, first = np.unique(flat, return_index=True)
    assert np.all(np.diff(first) > 0)


@pytest.mark.parametrize("seed", range(5))
def test_compactness_reduces_isoperimetric_ratio(seed):
    img = MultiChannelImage(np.random.default_rng(seed).random((1, 64, 64)))
    loose = slic(img, 0, SlicParams(target_superpixels=100, compactness=10.0))
    tight = slic(img, 0, SlicParams(target_superpixels=100, compactness=100.0))
    assert isoperimetric(tight) <= isoperimetric(loose)


def test_deterministic(rng):
    img = MultiChannelImage(rng.random((1, 32, 32)))
    a = slic(img, 0, SlicParams(target_superpixels=50))
    b = slic(img, 0, SlicParams(target_superpixels=50))
    assert np.array_equal(a.assignment, b.assignment)


def test_errors(rng):
    img = MultiChannelImage(rng.random((1, 4, 4)))
    with pytest.raises(ValueError):
        slic(img, 0, SlicParams(target_superpixels=17))
    with pytest.raises(ValueError):
        slic(img, 1, SlicParams(target_superpixels=2))
    with pytest.raises(ValueError):
        SlicParams(target_superpixels=0)


def test_apply_partition(rng):
    img = MultiChannelImage(rng.random((1, 24, 24)))
    em = slic(img, 0, SlicParams(target_superpixels=30))
    before = em.assignment.copy()
    shuffled = MultiChannelImage(rng.permutation(rng.random((2, 24, 24)).ravel()).reshape(2, 24, 24))
    parts = apply_partition(em, shuffled)
    assert np.array_equal(em.assignment, before)
    assert sum(p.shape[0] for p in parts) == 24 * 24 and all(p.shape[1] == 2 for p in parts)
    same = apply_partition(em, img)
    for s, flat in enumerate(em.pixel_sets):
        assert np.array_equal(same[s][:, 0], img.data[0].ravel()[flat])
    with pytest.raises(ValueError):
        apply_partition(em, MultiChannelImage(np.zeros((1, 5, 5))))


def test_majority_label():
    assignment = np.zeros((4, 5), int)
    assignment[:, 3:] = 1
    em = build_edge_map(assignment)
    labels = np.zeros((4, 5), int)
    labels[:, 3:] = 2            # superpixel 1 fully inside class 2
    labels[:2, :3] = 1           # superpixel 0: 6 of 12 are class 1, 6 are class 0 -> tie -> 0
    assert majority_label(em, LabelMap(labels, 3)).tolist() == [0, 2]
    labels[2, 0] = 1             # 7 vs 5
    assert majority_label(em, LabelMap(labels, 3)).tolist() == [1, 2]


def test_majority_label_oracle(rng):
    assignment = np.arange(100).repeat(10).reshape(40, 25)
    em = build_edge_map(assignment)
    labels = rng.integers(0, 4, (40, 25))
    got = majority_label(em, LabelMap(labels, 4))
    for s in range(100):
        counts = np.bincount(labels[assignment == s], minlength=4)
        assert got[s] == int(np.flatnonzero(counts == counts.max())[0])
