"""SLIC oversegmentation on one reference channel and the superpixel edge map."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage as ndi
from skimage.measure import label as connected_components

from ._cache import LRU
from .grid import LabelMap, MultiChannelImage

INTENSITY_SPAN = 100.0


@dataclass(frozen=True)
class SlicParams:
    target_superpixels: int = 1000
    compactness: float = 10.0
    iterations: int = 10
    min_region_fraction: float = 0.25

    def __post_init__(self):
        if self.target_superpixels < 1:
            raise ValueError("target_superpixels must be >= 1")
        if self.compactness <= 0:
            raise ValueError("compactness must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 <= self.min_region_fraction <= 1:
            raise ValueError("min_region_fraction must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class EdgeMap:
    """Superpixel partition plus adjacency edge segments.

    ``edges[j]`` is the (a, b) pair, a < b, of superpixels separated by edge
    segment j; ``boundary_pairs`` lists the 4-adjacent flat pixel index pairs
    crossing the boundaries and ``boundary_edge`` the edge each belongs to.
    """

    assignment: np.ndarray
    edges: np.ndarray
    boundary_pairs: np.ndarray
    boundary_edge: np.ndarray
    target_superpixels: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.assignment.shape

    @property
    def n_superpixels(self) -> int:
        return int(self.assignment.max()) + 1

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @cached_property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment.ravel(), minlength=self.n_superpixels)

    @cached_property
    def pixel_sets(self) -> list[np.ndarray]:
        """Flat pixel indices per superpixel, ascending."""
        flat = self.assignment.ravel()
        order = np.argsort(flat, kind="stable")
        return np.split(order, np.cumsum(self.sizes)[:-1])

    @cached_property
    def centroids(self) -> np.ndarray:
        h, w = self.shape
        rr, cc = np.divmod(np.arange(h * w), w)
        flat = self.assignment.ravel()
        cy = np.bincount(flat, weights=rr, minlength=self.n_superpixels) / self.sizes
        cx = np.bincount(flat, weights=cc, minlength=self.n_superpixels) / self.sizes
        return np.stack([cy, cx], axis=1)

    def superpixels(self) -> list[dict]:
        return [{"id": i, "pixels": px, "centroid": tuple(self.centroids[i])}
                for i, px in enumerate(self.pixel_sets)]


def build_edge_map(assignment: np.ndarray, target: int = 0) -> EdgeMap:
    a = np.ascontiguousarray(assignment, dtype=np.int32)
    h, w = a.shape
    idx = np.arange(h * w).reshape(h, w)
    p = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    q = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    flat = a.ravel()
    cross = flat[p] != flat[q]
    p, q = p[cross], q[cross]
    lo = np.minimum(flat[p], flat[q]).astype(np.int64)
    hi = np.maximum(flat[p], flat[q]).astype(np.int64)
    n = int(flat.max()) + 1
    keys, inverse = np.unique(lo * n + hi, return_inverse=True)
    edges = np.stack(np.divmod(keys, n), axis=1).astype(np.int32).reshape(-1, 2)
    pairs = np.stack([p, q], axis=1).astype(np.int64).reshape(-1, 2)
    for arr in (a, edges, pairs):
        arr.setflags(write=False)
    return EdgeMap(a, edges, pairs, inverse.astype(np.int32).reshape(-1), target)


def _scaled_reference(img: MultiChannelImage, channel: int) -> np.ndarray:
    plane = img.data[channel].astype(np.float64)
    lo, hi = plane.min(), plane.max()
    if hi == lo:
        return np.zeros_like(plane)
    return (plane - lo) / (hi - lo) * INTENSITY_SPAN


def _seed_centers(plane: np.ndarray, target: int) -> np.ndarray:
    h, w = plane.shape
    nx = min(w, target, max(1, int(np.ceil(np.sqrt(target * w / h) - 1e-9))))
    ny = min(h, max(1, int(round(target / nx))))
    cy = (np.arange(ny) + 0.5) * h / ny
    cx = (np.arange(nx) + 0.5) * w / nx
    grid = np.array([(y, x) for y in cy for x in cx])
    # move each seed to the lowest-gradient pixel of its 3x3 neighbourhood
    grad = np.hypot(ndi.sobel(plane, 0, mode="nearest"), ndi.sobel(plane, 1, mode="nearest"))
    out = []
    for y, x in grid:
        r0, c0 = int(y), int(x)
        best = (np.inf, r0, c0)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                r, c = r0 + dy, c0 + dx
                if 0 <= r < h and 0 <= c < w and grad[r, c] < best[0]:
                    best = (grad[r, c], r, c)
        out.append((best[1], best[2], plane[best[1], best[2]]))
    return np.array(out, dtype=np.float64)


def _cluster(plane: np.ndarray, centers: np.ndarray, step: float, m: float, iterations: int) -> np.ndarray:
    h, w = plane.shape
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    spatial = (m / step) ** 2
    reach = int(np.ceil(step))
    labels = np.full((h, w), -1, dtype=np.int64)
    for _ in range(iterations):
        labels.fill(-1)
        best = np.full((h, w), np.inf)
        for k, (cy, cx, ci) in enumerate(centers):
            r0, r1 = max(0, int(cy) - reach), min(h, int(cy) + reach + 1)
            c0, c1 = max(0, int(cx) - reach), min(w, int(cx) + reach + 1)
            d = ((plane[r0:r1, c0:c1] - ci) ** 2
                 + spatial * ((rows[r0:r1] - cy) ** 2 + (cols[:, c0:c1] - cx) ** 2))
            win = best[r0:r1, c0:c1]
            closer = d < win
            win[closer] = d[closer]
            labels[r0:r1, c0:c1][closer] = k
        orphan = labels < 0
        if orphan.any():
            rr, cc = np.nonzero(orphan)
            dist = (rr[:, None] - centers[None, :, 0]) ** 2 + (cc[:, None] - centers[None, :, 1]) ** 2
            labels[rr, cc] = np.argmin(dist, axis=1)
        flat = labels.ravel()
        n = centers.shape[0]
        counts = np.bincount(flat, minlength=n)
        rr, cc = np.divmod(np.arange(h * w), w)
        filled = counts > 0
        for col, vals in enumerate((rr, cc, plane.ravel())):
            sums = np.bincount(flat, weights=vals, minlength=n)
            centers[filled, col] = sums[filled] / counts[filled]
    return labels


def _merge_small(regions: np.ndarray, plane: np.ndarray, min_size: float) -> np.ndarray:
    """Merge regions smaller than ``min_size`` into their most similar neighbour."""
    flat = regions.ravel()
    n = int(flat.max()) + 1
    size = np.bincount(flat, minlength=n).astype(np.float64)
    total = np.bincount(flat, weights=plane.ravel(), minlength=n)
    if n == 1 or size.min() >= min_size:
        return regions
    h, w = regions.shape
    idx = np.arange(h * w).reshape(h, w)
    p = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    q = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    a, b = flat[p], flat[q]
    cross = a != b
    adj: list[set] = [set() for _ in range(n)]
    for x, y in set(zip(a[cross].tolist(), b[cross].tolist())):
        adj[x].add(y)
        adj[y].add(x)
    parent = np.arange(n)
    for r in np.lexsort((np.arange(n), size)):
        if size[r] >= min_size or not adj[r]:
            continue
        mean_r = total[r] / size[r]
        target = min(adj[r], key=lambda t: (abs(total[t] / size[t] - mean_r), t))
        parent[r] = target
        size[target] += size[r]
        total[target] += total[r]
        for nb in adj[r]:
            adj[nb].discard(r)
            if nb != target:
                adj[nb].add(target)
                adj[target].add(nb)
        adj[r] = set()
    # resolve chains of merges
    root = parent.copy()
    while True:
        nxt = root[root]
        if np.array_equal(nxt, root):
            break
        root = nxt
    return root[regions]


def _relabel_raster(regions: np.ndarray) -> np.ndarray:
    flat = regions.ravel()
    _, first = np.unique(flat, return_index=True)
    order = np.argsort(first)
    lut = np.empty(int(flat.max()) + 1, dtype=np.int32)
    lut[np.unique(flat)[order]] = np.arange(order.size, dtype=np.int32)
    return lut[regions]


def slic(img: MultiChannelImage, reference_channel: int = 0, params: SlicParams = SlicParams()) -> EdgeMap:
    if not 0 <= reference_channel < img.channels:
        raise ValueError(f"reference channel {reference_channel} out of range")
    h, w = img.shape
    if params.target_superpixels > h * w:
        raise ValueError(f"target of {params.target_superpixels} superpixels exceeds {h * w} pixels")
    plane = _scaled_reference(img, reference_channel)
    step = np.sqrt(h * w / params.target_superpixels)
    centers = _seed_centers(plane, params.target_superpixels)
    labels = _cluster(plane, centers, step, params.compactness, params.iterations)
    regions = connected_components(labels + 1, connectivity=1, background=0) - 1
    regions = _merge_small(regions, plane, params.min_region_fraction * h * w / params.target_superpixels)
    return build_edge_map(_relabel_raster(regions), params.target_superpixels)


_SLIC_CACHE = LRU(128)


def cached_slic(img: MultiChannelImage, reference_channel: int, params: SlicParams) -> EdgeMap:
    key = (img.digest(), reference_channel, params)
    return _SLIC_CACHE.get(key, lambda: slic(img, reference_channel, params))


def apply_partition(edge_map: EdgeMap, other: MultiChannelImage) -> list[np.ndarray]:
    """Reuse a partition on another image: per-superpixel (n, C) intensity arrays."""
    if other.shape != edge_map.shape:
        raise ValueError(f"image shape {other.shape} does not match partition {edge_map.shape}")
    flat = other.data.reshape(other.channels, -1)
    return [flat[:, px].T for px in edge_map.pixel_sets]


def majority_label(edge_map: EdgeMap, labels: LabelMap) -> np.ndarray:
    if labels.shape != edge_map.shape:
        raise ValueError("label map does not match partition")
    n, k = edge_map.n_superpixels, labels.n_classes
    hist = np.bincount(edge_map.assignment.ravel().astype(np.int64) * k + labels.labels.ravel(),
                       minlength=n * k).reshape(n, k)
    return np.argmax(hist, axis=1)
