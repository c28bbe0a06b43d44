import numpy as np
import pytest
from scipy import ndimage

from dmtseg import synthgen
from dmtseg.synthgen import PhantomParams, generate, generate_subject


def test_noiseless_discs_have_exact_contrast():
    p = PhantomParams(size=64, subjects=1, noise_sigma=0.0, boundary_irregularity=0.0)
    img, lab = generate_subject(p, 0)
    contrast = np.asarray(p.contrast, dtype=np.float32)
    assert np.array_equal(img.data, contrast[lab.labels].transpose(2, 0, 1))
    # with no irregularity the regions are discs around one centre
    ys, xs = np.nonzero(lab.labels >= 1)
    cy, cx = ys.mean(), xs.mean()
    for cls in (1, 2, 3):
        yy, xx = np.nonzero(lab.labels >= cls)
        r = np.hypot(yy - cy, xx - cx)
        area = yy.size
        assert r.max() <= np.sqrt(area / np.pi) + 1.5


def test_deterministic():
    p = PhantomParams(size=48, subjects=3, rng_seed=3)
    a, b = generate(p), generate(p)
    for (ia, la), (ib, lb) in zip(a, b):
        assert ia.digest() == ib.digest() and la.digest() == lb.digest()
    other = generate(PhantomParams(size=48, subjects=3, rng_seed=4))
    assert a[0][0].digest() != other[0][0].digest()


def test_nesting_and_class_sizes():
    data = generate(PhantomParams(size=64, subjects=100, rng_seed=11, boundary_irregularity=0.6))
    for _, lab in data:
        counts = np.bincount(lab.labels.ravel(), minlength=4)
        assert np.all(counts > 0)
        assert counts[1] + counts[2] + counts[3] < counts[0]
        # each composite region is a single connected blob
        for cls in (1, 2, 3):
            inner = lab.labels >= cls
            assert ndimage.label(inner)[1] == 1


def test_class_counts_decrease_at_defaults():
    for _, lab in generate(PhantomParams(size=128, subjects=100, rng_seed=42)):
        counts = np.bincount(lab.labels.ravel(), minlength=4)
        assert np.all(np.diff(counts) < 0), counts


def test_noise_level():
    p = PhantomParams(size=96, subjects=1, boundary_irregularity=0.0)
    img, lab = generate_subject(p, 0)
    clean = np.asarray(p.contrast)[lab.labels].transpose(2, 0, 1)
    resid = img.data - clean
    assert p.noise_std == pytest.approx(0.05 * (1.00 - 0.27))
    assert resid.std() == pytest.approx(p.noise_std, rel=0.05)


def test_mimics_stay_out_of_the_labels():
    p = PhantomParams(size=64, subjects=2, mimics=3, noise_sigma=0.0)
    plain = PhantomParams(size=64, subjects=2, mimics=0, noise_sigma=0.0)
    for (img, lab), (img0, lab0) in zip(generate(p), generate(plain)):
        assert np.array_equal(lab.labels, lab0.labels)
        bg = lab.labels == 0
        changed = np.any(img.data != img0.data, axis=0)
        assert changed.any() and np.all(bg[changed])


def test_dataset_round_trip(tmp_path):
    p = PhantomParams(size=40, subjects=2, rng_seed=9)
    data = generate(p)
    path = synthgen.write_dataset(tmp_path / "d", data, p)
    manifest = synthgen.read_manifest(path)
    assert manifest["subjects"] == "2" and manifest["seed"] == "9"
    back = synthgen.read_dataset(tmp_path / "d")
    assert [(i.digest(), l.digest()) for i, l in back] == [(i.digest(), l.digest()) for i, l in data]


@pytest.mark.parametrize("kw", [dict(size=16), dict(subjects=0), dict(noise_sigma=-1),
                                dict(contrast=((0, 0), (1, 1), (2, 2))),
                                dict(contrast=((0.1,), (0.1,), (0.2,), (0.3,)))])
def test_invalid_params(kw):
    with pytest.raises(ValueError):
        PhantomParams(**kw)


def test_read_dataset_errors(tmp_path):
    (tmp_path / "manifest.txt").write_text("subjects = 0\n")
    with pytest.raises(ValueError):
        synthgen.read_dataset(tmp_path)
    (tmp_path / "manifest.txt").write_text("junk line\n")
    with pytest.raises(ValueError):
        synthgen.read_dataset(tmp_path)
