"""Statistical, texture and spatial features at patch and superpixel level.

Every feature is derived from a small set of per-pixel maps (intensity,
Sobel, gradient, Laplacian, DoG, curvature, Gabor magnitude, mirror
difference) which are then aggregated either over a square window or over an
arbitrary pixel set.  Layouts are ordered lists of names; one layout per
(config, channel count, level) so vectors from different calls line up.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi
from scipy.signal import fftconvolve

from ._cache import LRU
from .grid import MultiChannelImage, ProbabilityMap, extract_patch, window_offset

GABOR_SIGMA_RATIO = 0.56
GABOR_ASPECT = 0.5
_ZERO_VAR = 1e-12


@dataclass(frozen=True)
class FeatureConfig:
    gabor_orientations: int = 4
    gabor_wavelengths: tuple = (4.0, 8.0)
    dog_sigma_pairs: tuple = ((1.0, 2.0),)
    entropy_bins: int = 32
    include_context: bool = False
    context_classes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "gabor_wavelengths", tuple(float(w) for w in self.gabor_wavelengths))
        object.__setattr__(self, "dog_sigma_pairs", tuple((float(a), float(b)) for a, b in self.dog_sigma_pairs))
        if self.gabor_orientations < 1 or not self.gabor_wavelengths or self.entropy_bins < 1:
            raise ValueError("feature bank counts must be >= 1")
        if any(w <= 0 for w in self.gabor_wavelengths):
            raise ValueError("Gabor wavelengths must be positive")
        if not self.dog_sigma_pairs or any(not 0 < a < b for a, b in self.dog_sigma_pairs):
            raise ValueError("each DoG pair needs 0 < sigma1 < sigma2")
        if self.context_classes < 1:
            raise ValueError("context_classes must be >= 1")

    def with_context(self, flag: bool) -> "FeatureConfig":
        return FeatureConfig(self.gabor_orientations, self.gabor_wavelengths, self.dog_sigma_pairs,
                             self.entropy_bins, flag, self.context_classes)

    def bank_key(self) -> tuple:
        return (self.gabor_orientations, self.gabor_wavelengths, self.dog_sigma_pairs, self.entropy_bins)


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    layout: tuple = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (len(self.layout),):
            raise ValueError("feature vector length does not match its layout")
        if not np.all(np.isfinite(values)):
            raise ValueError("feature vector has non-finite entries")
        object.__setattr__(self, "values", values)

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.layout.index(name)])


# --- layouts --------------------------------------------------------------------

def _orientations(cfg: FeatureConfig) -> list[float]:
    return [np.pi * k / cfg.gabor_orientations for k in range(cfg.gabor_orientations)]


def _map_names(cfg: FeatureConfig) -> list[str]:
    """Per-channel derived maps whose window/set mean is a feature."""
    names = ["sobel", "gradient", "laplacian"]
    names += [f"dog_{a:g}_{b:g}" for a, b in cfg.dog_sigma_pairs]
    names += ["mean_curvature", "gaussian_curvature"]
    names += [f"gabor_o{np.degrees(t):.0f}_w{w:g}" for t in _orientations(cfg) for w in cfg.gabor_wavelengths]
    return names


def _channel_stat_names(cfg: FeatureConfig) -> list[str]:
    first = ["mean", "std", "max", "min", "median"]
    maps = _map_names(cfg)
    n_dog = len(cfg.dog_sigma_pairs)
    # order: first-order stats, Sobel/gradient, higher order, texture
    return (first + maps[:3 + n_dog] + ["entropy"] + maps[3 + n_dog:5 + n_dog]
            + ["kurtosis", "skewness"] + maps[5 + n_dog:])


def patch_layout(cfg: FeatureConfig, channels: int) -> tuple:
    names = [f"ch{c}:{s}" for c in range(channels) for s in _channel_stat_names(cfg)]
    names += ["proj_x", "proj_y"]
    names += [f"ch{c}:symmetry" for c in range(channels)]
    names += [f"ch{c}:neighborhood" for c in range(channels)]
    if cfg.include_context:
        for k in range(cfg.context_classes):
            names += [f"ctx{k}:center", f"ctx{k}:mean"]
    return tuple(names)


def superpixel_layout(cfg: FeatureConfig, channels: int) -> tuple:
    names = list(patch_layout(cfg.with_context(False), channels))
    if cfg.include_context:
        names += [f"ctx{k}:mean" for k in range(cfg.context_classes)]
    return tuple(names)


# --- per-pixel maps -------------------------------------------------------------

def _grad(a: np.ndarray, axis: int) -> np.ndarray:
    if a.shape[axis] < 2:
        return np.zeros_like(a)
    return np.gradient(a, axis=axis)


def gabor_kernel(wavelength: float, theta: float) -> np.ndarray:
    """Complex Gabor kernel with zero DC response, normalised by its envelope mass."""
    sigma = GABOR_SIGMA_RATIO * wavelength
    radius = int(np.ceil(3 * sigma / GABOR_ASPECT))
    y, x = np.mgrid[-radius:radius + 1, -radius:radius + 1].astype(np.float64)
    xr = x * np.cos(theta) + y * np.sin(theta)
    yr = -x * np.sin(theta) + y * np.cos(theta)
    env = np.exp(-(xr ** 2 + (GABOR_ASPECT * yr) ** 2) / (2 * sigma ** 2))
    env /= env.sum()
    real = env * np.cos(2 * np.pi * xr / wavelength)
    real -= env * real.sum()
    imag = env * np.sin(2 * np.pi * xr / wavelength)
    return real + 1j * imag


def _gabor_magnitude(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    r = kernel.shape[0] // 2
    padded = np.pad(plane, r, mode="edge")
    resp = fftconvolve(padded, kernel[::-1, ::-1], mode="same")[r:-r or None, r:-r or None]
    return np.abs(resp)


class PixelMaps:
    """Per-channel derived maps for one image (float64), plus entropy bin indices."""

    def __init__(self, img: MultiChannelImage, cfg: FeatureConfig):
        data = img.data.astype(np.float64)
        self.channels, self.height, self.width = data.shape
        self.intensity = data
        self.names = _map_names(cfg)
        maps = np.empty((self.channels, len(self.names), self.height, self.width))
        bins = np.empty(data.shape, dtype=np.intp)
        kernels = [gabor_kernel(w, t) for t in _orientations(cfg) for w in cfg.gabor_wavelengths]
        for c, plane in enumerate(data):
            sx = ndi.sobel(plane, axis=1, mode="nearest") / 8.0
            sy = ndi.sobel(plane, axis=0, mode="nearest") / 8.0
            ix, iy = _grad(plane, 1), _grad(plane, 0)
            ixx, iyy, ixy = _grad(ix, 1), _grad(iy, 0), _grad(ix, 0)
            k = 0
            maps[c, k] = np.hypot(sx, sy); k += 1
            maps[c, k] = np.hypot(ix, iy); k += 1
            maps[c, k] = ixx + iyy; k += 1
            for s1, s2 in cfg.dog_sigma_pairs:
                maps[c, k] = (ndi.gaussian_filter(plane, s1, mode="nearest")
                              - ndi.gaussian_filter(plane, s2, mode="nearest"))
                k += 1
            g = 1.0 + ix ** 2 + iy ** 2
            maps[c, k] = ((1 + ix ** 2) * iyy - 2 * ix * iy * ixy + (1 + iy ** 2) * ixx) / (2 * g ** 1.5); k += 1
            maps[c, k] = (ixx * iyy - ixy ** 2) / g ** 2; k += 1
            for kern in kernels:
                maps[c, k] = _gabor_magnitude(plane, kern); k += 1
            lo, hi = plane.min(), plane.max()
            if hi > lo:
                bins[c] = np.clip(((plane - lo) / (hi - lo) * cfg.entropy_bins).astype(np.intp),
                                  0, cfg.entropy_bins - 1)
            else:
                bins[c] = 0
        self.maps = maps
        self.bins = bins
        self.symmetry = np.abs(data - data[:, :, ::-1])
        self.n_bins = cfg.entropy_bins


_PIXEL_CACHE = LRU(32)
_PATCH_CACHE = LRU(64)


def pixel_maps(img: MultiChannelImage, cfg: FeatureConfig) -> PixelMaps:
    return _PIXEL_CACHE.get((img.digest(), cfg.bank_key()), lambda: PixelMaps(img, cfg))


def clear_caches():
    _PIXEL_CACHE.clear()
    _PATCH_CACHE.clear()


# --- moment helpers ---------------------------------------------------------------

def _entropy(p: np.ndarray, axis: int) -> np.ndarray:
    p = np.clip(p, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 1e-12, -p * np.log2(np.where(p > 1e-12, p, 1.0)), 0.0)
    return terms.sum(axis=axis)


def _shape_stats(var, mu3, mu4, degenerate):
    """std, skewness, excess kurtosis with the zero-variance convention."""
    var = np.where(degenerate | (var < 0), 0.0, var)
    std = np.sqrt(var)
    flat = std < _ZERO_VAR
    safe = np.where(flat, 1.0, std)
    skew = np.where(flat, 0.0, mu3 / safe ** 3)
    kurt = np.where(flat, 0.0, mu4 / safe ** 4 - 3.0)
    return std, skew, kurt


def _check_context(context: ProbabilityMap | None, img: MultiChannelImage, cfg: FeatureConfig):
    if not cfg.include_context:
        return None
    if context is None:
        raise ValueError("feature config expects a context map but none was given")
    if context.shape != img.shape or context.n_classes != cfg.context_classes:
        raise ValueError("context map does not match image size / context class count")
    return context.values.astype(np.float64)


# --- patch level -------------------------------------------------------------------

def _box(a: np.ndarray, side: int) -> np.ndarray:
    return ndi.uniform_filter(a, size=side, mode="nearest")


def _neighbor_ring(mean_map: np.ndarray, side: int) -> np.ndarray:
    """Mean of the patch-mean map at the 8 neighbouring patch centres (clamped)."""
    h, w = mean_map.shape
    rows, cols = np.arange(h), np.arange(w)
    acc = np.zeros_like(mean_map)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            rr = np.clip(rows + dy * side, 0, h - 1)
            cc = np.clip(cols + dx * side, 0, w - 1)
            acc += mean_map[rr[:, None], cc[None, :]]
    return acc / 8.0


def _base_patch_maps(img: MultiChannelImage, side: int, cfg: FeatureConfig) -> np.ndarray:
    pm = pixel_maps(img, cfg)
    h, w = pm.height, pm.width
    n_side = side * side
    blocks = []
    mean_maps = []
    for c in range(pm.channels):
        plane = pm.intensity[c]
        y = plane - plane.mean()
        m1 = _box(y, side)
        m2, m3, m4 = _box(y ** 2, side), _box(y ** 3, side), _box(y ** 4, side)
        var = m2 - m1 ** 2
        mu3 = m3 - 3 * m1 * m2 + 2 * m1 ** 3
        mu4 = m4 - 4 * m1 * m3 + 6 * m1 ** 2 * m2 - 3 * m1 ** 4
        mx = ndi.maximum_filter(plane, size=side, mode="nearest")
        mn = ndi.minimum_filter(plane, size=side, mode="nearest")
        std, skew, kurt = _shape_stats(var, mu3, mu4, mx == mn)
        if n_side % 2:
            median = ndi.rank_filter(plane, n_side // 2, size=side, mode="nearest")
        else:
            median = 0.5 * (ndi.rank_filter(plane, n_side // 2 - 1, size=side, mode="nearest")
                            + ndi.rank_filter(plane, n_side // 2, size=side, mode="nearest"))
        mean = m1 + plane.mean()
        mean = np.where(mx == mn, mx, mean)
        present = np.unique(pm.bins[c])
        probs = np.stack([_box((pm.bins[c] == b).astype(np.float64), side) for b in present])
        entropy = _entropy(probs, axis=0)
        means = {name: _box(pm.maps[c, i], side) for i, name in enumerate(pm.names)}
        named = {"mean": mean, "std": std, "max": mx, "min": mn, "median": median,
                 "entropy": entropy, "kurtosis": kurt, "skewness": skew, **means}
        blocks.extend(named[s] for s in _channel_stat_names(cfg))
        mean_maps.append(mean)
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    blocks.append(cc / (w - 1) if w > 1 else np.full((h, w), 0.5))
    blocks.append(rr / (h - 1) if h > 1 else np.full((h, w), 0.5))
    blocks.extend(_box(pm.symmetry[c], side) for c in range(pm.channels))
    blocks.extend(_neighbor_ring(m, side) for m in mean_maps)
    return np.stack(blocks).astype(np.float32)


def base_patch_maps(img: MultiChannelImage, side: int, cfg: FeatureConfig) -> np.ndarray:
    """Context-free dense patch features, shape (F, H, W) float32 (memoised)."""
    key = (img.digest(), cfg.bank_key(), side)
    return _PATCH_CACHE.get(key, lambda: _base_patch_maps(img, side, cfg))


def context_patch_maps(context: ProbabilityMap, side: int) -> np.ndarray:
    """Per class: context value at the centre, then its patch mean."""
    vals = context.values.astype(np.float64)
    out = []
    for k in range(vals.shape[0]):
        out.append(vals[k])
        out.append(_box(vals[k], side))
    return np.stack(out).astype(np.float32)


def patch_feature_maps(img: MultiChannelImage, context: ProbabilityMap | None, side: int,
                       cfg: FeatureConfig) -> np.ndarray:
    base = base_patch_maps(img, side, cfg)
    ctx = _check_context(context, img, cfg)
    if ctx is None:
        return base
    return np.concatenate([base, context_patch_maps(context, side)])


def patch_features(img: MultiChannelImage, context: ProbabilityMap | None, center: tuple[int, int],
                   side: int, cfg: FeatureConfig) -> FeatureVector:
    """Feature vector of the side x side patch at ``center`` = (row, col).

    Computed directly on the extracted blocks; the dense ``patch_feature_maps``
    must agree with it at every pixel.
    """
    pm = pixel_maps(img, cfg)
    ctx = _check_context(context, img, cfg)
    r, c = center
    h, w = pm.height, pm.width
    values = []
    patch_means = []
    for ch in range(pm.channels):
        block = extract_patch(pm.intensity[ch], center, side)[0].ravel()
        bins = extract_patch(pm.bins[ch], center, side)[0].ravel()
        stats = _set_stats(block, bins, pm.n_bins)
        for i, name in enumerate(pm.names):
            stats[name] = extract_patch(pm.maps[ch, i], center, side).mean()
        values.extend(stats[s] for s in _channel_stat_names(cfg))
        patch_means.append(stats["mean"])
    values.append(c / (w - 1) if w > 1 else 0.5)
    values.append(r / (h - 1) if h > 1 else 0.5)
    values.extend(extract_patch(pm.symmetry[ch], center, side).mean() for ch in range(pm.channels))
    for ch in range(pm.channels):
        ring = []
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy or dx:
                    nc = (min(max(r + dy * side, 0), h - 1), min(max(c + dx * side, 0), w - 1))
                    ring.append(_set_stats(extract_patch(pm.intensity[ch], nc, side).ravel(), None, 0)["mean"])
        values.append(np.mean(ring))
    if ctx is not None:
        for k in range(ctx.shape[0]):
            values.append(ctx[k, r, c])
            values.append(extract_patch(ctx[k], center, side).mean())
    return FeatureVector(np.array(values), patch_layout(cfg, pm.channels))


def _set_stats(values: np.ndarray, bins: np.ndarray | None, n_bins: int) -> dict:
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    mean = values.mean()
    if values.max() == values.min():
        mean = values[0]
    d = values - mean
    var = (d ** 2).mean()
    std, skew, kurt = _shape_stats(np.array(var), np.array((d ** 3).mean()), np.array((d ** 4).mean()),
                                   np.array(values.max() == values.min()))
    out = {"mean": mean, "std": float(std), "max": values.max(), "min": values.min(),
           "median": float(np.median(values)), "skewness": float(skew), "kurtosis": float(kurt)}
    if bins is not None:
        out["entropy"] = float(_entropy(np.bincount(bins, minlength=n_bins) / n, axis=0))
    return out


# --- superpixel level --------------------------------------------------------------

def superpixel_features(img: MultiChannelImage, context: ProbabilityMap | None, pixel_set,
                        cfg: FeatureConfig, neighbor_means=None) -> FeatureVector:
    """Features of one arbitrary pixel set given as (row, col) pairs.

    ``neighbor_means`` holds, per channel, the mean intensity of the adjacent
    superpixels; without it the set's own mean is used.
    """
    coords = np.asarray(pixel_set, dtype=np.intp).reshape(-1, 2)
    if coords.shape[0] == 0:
        raise ValueError("pixel set is empty")
    pm = pixel_maps(img, cfg)
    ctx = _check_context(context, img, cfg)
    rows, cols = coords[:, 0], coords[:, 1]
    if rows.min() < 0 or cols.min() < 0 or rows.max() >= pm.height or cols.max() >= pm.width:
        raise ValueError("pixel set leaves the image")
    values = []
    own_means = []
    for ch in range(pm.channels):
        stats = _set_stats(pm.intensity[ch][rows, cols], pm.bins[ch][rows, cols], pm.n_bins)
        for i, name in enumerate(pm.names):
            stats[name] = pm.maps[ch, i][rows, cols].mean()
        values.extend(stats[s] for s in _channel_stat_names(cfg))
        own_means.append(stats["mean"])
    values.append(cols.mean() / (pm.width - 1) if pm.width > 1 else 0.5)
    values.append(rows.mean() / (pm.height - 1) if pm.height > 1 else 0.5)
    values.extend(pm.symmetry[ch][rows, cols].mean() for ch in range(pm.channels))
    values.extend(own_means if neighbor_means is None else list(neighbor_means))
    if ctx is not None:
        values.extend(ctx[k][rows, cols].mean() for k in range(ctx.shape[0]))
    return FeatureVector(np.array(values), superpixel_layout(cfg, pm.channels))


def superpixel_feature_matrix(img: MultiChannelImage, assignment: np.ndarray, edges: np.ndarray,
                              context: ProbabilityMap | None, cfg: FeatureConfig) -> np.ndarray:
    """Vectorised ``superpixel_features`` for every superpixel of a partition.

    ``assignment`` is the per-pixel superpixel id map (ids 0..N-1) and
    ``edges`` the (E, 2) adjacency list.  Returns an (N, F) float64 matrix.
    """
    pm = pixel_maps(img, cfg)
    ctx = _check_context(context, img, cfg)
    sp = np.asarray(assignment).ravel()
    n = int(sp.max()) + 1
    counts = np.bincount(sp, minlength=n).astype(np.float64)
    starts = np.concatenate([[0], np.cumsum(counts).astype(np.intp)[:-1]])
    cnt = counts.astype(np.intp)

    def smean(a):
        return np.bincount(sp, weights=np.asarray(a, dtype=np.float64).ravel(), minlength=n) / counts

    cols_out = []
    chan_means = []
    for ch in range(pm.channels):
        plane = pm.intensity[ch].ravel()
        order = np.lexsort((plane, sp))
        srt = plane[order]
        mn, mx = srt[starts], srt[starts + cnt - 1]
        lo_mid, hi_mid = srt[starts + (cnt - 1) // 2], srt[starts + cnt // 2]
        median = 0.5 * (lo_mid + hi_mid)
        mean = smean(plane)
        mean = np.where(mx == mn, mx, mean)
        d = plane - mean[sp]
        var = smean(d ** 2)
        std, skew, kurt = _shape_stats(var, smean(d ** 3), smean(d ** 4), mx == mn)
        hist = np.bincount(sp * pm.n_bins + pm.bins[ch].ravel(), minlength=n * pm.n_bins)
        entropy = _entropy(hist.reshape(n, pm.n_bins) / counts[:, None], axis=1)
        named = {"mean": mean, "std": std, "max": mx, "min": mn, "median": median,
                 "entropy": entropy, "kurtosis": kurt, "skewness": skew}
        for i, name in enumerate(pm.names):
            named[name] = smean(pm.maps[ch, i])
        cols_out.extend(named[s] for s in _channel_stat_names(cfg))
        chan_means.append(mean)
    rr, cc = np.divmod(np.arange(sp.size), pm.width)
    cols_out.append(smean(cc) / (pm.width - 1) if pm.width > 1 else np.full(n, 0.5))
    cols_out.append(smean(rr) / (pm.height - 1) if pm.height > 1 else np.full(n, 0.5))
    cols_out.extend(smean(pm.symmetry[ch]) for ch in range(pm.channels))
    edges = np.asarray(edges, dtype=np.intp).reshape(-1, 2)
    degree = np.bincount(edges.ravel(), minlength=n).astype(np.float64)
    for mean in chan_means:
        acc = (np.bincount(edges[:, 0], weights=mean[edges[:, 1]], minlength=n)
               + np.bincount(edges[:, 1], weights=mean[edges[:, 0]], minlength=n))
        cols_out.append(np.where(degree > 0, acc / np.maximum(degree, 1), mean))
    if ctx is not None:
        cols_out.extend(smean(ctx[k]) for k in range(ctx.shape[0]))
    return np.stack(cols_out, axis=1)
