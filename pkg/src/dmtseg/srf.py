"""Structured random forest: patch features in, label patches out."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _srf_kernels as K
from . import blob
from .features import FeatureConfig, patch_feature_maps, patch_layout
from .grid import (ContractError, LabelMap, MultiChannelImage, PatchGeometry, ProbabilityMap, extract_patch,
                   normalize_float32)


@dataclass(frozen=True)
class SrfParams:
    n_trees: int = 15
    feature_patch_side: int = 10
    label_patch_side: int = 7
    max_depth: int = 20
    min_samples_leaf: int = 5
    candidate_features_per_node: int | None = None  # None: ceil(sqrt(d))
    candidate_thresholds: int = 10
    bootstrap_fraction: float = 1.0
    samples_per_image: int = 2000
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 0 or self.min_samples_leaf < 1:
            raise ValueError("invalid forest size parameters")
        PatchGeometry(self.feature_patch_side, self.label_patch_side)
        if not 0 < self.bootstrap_fraction <= 1:
            raise ValueError("bootstrap_fraction must lie in (0, 1]")
        if self.candidate_thresholds < 1 or self.samples_per_image < 1:
            raise ValueError("candidate_thresholds and samples_per_image must be >= 1")
        if self.candidate_features_per_node is not None and self.candidate_features_per_node < 1:
            raise ValueError("candidate_features_per_node must be >= 1")

    @property
    def geometry(self) -> PatchGeometry:
        return PatchGeometry(self.feature_patch_side, self.label_patch_side)


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_id: np.ndarray
    depth: np.ndarray
    leaves: np.ndarray  # (n_leaves, P, L) per-position label distributions

    @property
    def n_leaves(self) -> int:
        return self.leaves.shape[0]

    def apply(self, X: np.ndarray) -> np.ndarray:
        return K.route(np.ascontiguousarray(X, dtype=np.float32), self.feature, self.threshold,
                       self.left, self.right, self.leaf_id)


@dataclass
class SrfForest:
    trees: list[Tree]
    n_classes: int
    geometry: PatchGeometry
    fingerprint: str
    n_features: int
    params: SrfParams = field(default_factory=SrfParams)

    def leaf_table(self) -> tuple[np.ndarray, np.ndarray]:
        offsets = np.cumsum([0] + [t.n_leaves for t in self.trees])
        return offsets, np.concatenate([t.leaves for t in self.trees])


def layout_fingerprint(layout: tuple, geometry: PatchGeometry, n_classes: int) -> str:
    h = hashlib.sha256()
    h.update("\n".join(layout).encode())
    h.update(f"|{geometry.feature_patch_side}|{geometry.label_patch_side}|{n_classes}".encode())
    return h.hexdigest()[:32]


def entropy_bits(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    counts = counts[counts > 0]
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


def information_gain(parent, left, right) -> float:
    parent, left, right = (np.asarray(a, dtype=np.float64) for a in (parent, left, right))
    n, nl, nr = parent.sum(), left.sum(), right.sum()
    return entropy_bits(parent) - nl / n * entropy_bits(left) - nr / n * entropy_bits(right)


# --- training ---------------------------------------------------------------------------

def sample_centers(labels: LabelMap, n: int, rng: np.random.Generator) -> np.ndarray:
    """Flat pixel indices: an equal quota per centre class, shortfall filled from background."""
    flat = labels.labels.ravel()
    k = labels.n_classes
    quota = n // k
    chosen = []
    taken = 0
    for cls in range(1, k):
        pool = np.flatnonzero(flat == cls)
        m = min(quota, pool.size)
        if m:
            chosen.append(rng.choice(pool, m, replace=False))
            taken += m
    pool = np.flatnonzero(flat == 0)
    m = min(n - taken, pool.size)
    if m:
        chosen.append(rng.choice(pool, m, replace=False))
    if not chosen:
        return np.empty(0, dtype=np.intp)
    return np.sort(np.concatenate(chosen))


def label_patches(labels: LabelMap, centers: np.ndarray, side: int) -> np.ndarray:
    h, w = labels.shape
    rows, cols = np.divmod(centers, w)
    off = np.arange(side) - side // 2
    rr = np.clip(rows[:, None] + off[None, :], 0, h - 1)
    cc = np.clip(cols[:, None] + off[None, :], 0, w - 1)
    return labels.labels[rr[:, :, None], cc[:, None, :]].reshape(len(centers), side * side)


def training_samples(data, contexts, params: SrfParams, cfg: FeatureConfig, seed: int):
    """Stack sampled (feature vector, label patch) rows from training images."""
    Xs, Ys = [], []
    for i, (img, labels) in enumerate(data):
        ctx = None if contexts is None else contexts[i]
        F = patch_feature_maps(img, ctx, params.feature_patch_side, cfg)
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        centers = sample_centers(labels, params.samples_per_image, rng)
        Xs.append(F.reshape(F.shape[0], -1)[:, centers].T)
        Ys.append(label_patches(labels, centers, params.label_patch_side))
    return np.concatenate(Xs), np.concatenate(Ys)


def srf_train(X: np.ndarray, Y: np.ndarray, params: SrfParams, n_classes: int,
              fingerprint: str = "") -> SrfForest:
    """Fit a forest on feature rows ``X`` (n, d) and flattened label patches ``Y`` (n, P)."""
    X = np.ascontiguousarray(X, dtype=np.float32)
    Y = np.ascontiguousarray(Y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training needs a non-empty (n, d) feature matrix")
    side = params.label_patch_side
    if Y.shape != (X.shape[0], side * side):
        raise ValueError(f"label patches must be (n, {side * side})")
    if Y.min() < 0 or Y.max() >= n_classes:
        raise ValueError("label patch entries out of class range")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite training features")
    n, d = X.shape
    # canonical order makes bootstrap draws independent of sample order
    order = np.lexsort(np.concatenate([X.T.astype(np.float64), Y.T.astype(np.float64)])[::-1])
    X, Y = X[order], Y[order]
    n_try = params.candidate_features_per_node or math.ceil(math.sqrt(d))
    n_try = min(n_try, d)
    center = (side // 2) * side + side // 2
    n_boot = max(1, int(round(params.bootstrap_fraction * n)))
    trees = []
    for t in range(params.n_trees):
        tree_seed = (params.rng_seed + t) % (2 ** 32)
        boot = np.random.default_rng(tree_seed).integers(0, n, size=n_boot)
        feat, thr, left, right, leaf_id, depth, counts = K.build_tree(
            X, Y, boot.astype(np.int64), n_classes, center, tree_seed, params.max_depth,
            params.min_samples_leaf, n_try, params.candidate_thresholds)
        leaves = (counts / counts.sum(axis=2, keepdims=True)).astype(np.float32)
        trees.append(Tree(feat, thr, left, right, leaf_id, depth, leaves))
    return SrfForest(trees, n_classes, params.geometry, fingerprint, d, params)


def fit_forest(data, contexts, params: SrfParams, cfg: FeatureConfig, n_classes: int) -> SrfForest:
    """Sample patches from labelled images (with optional context maps) and fit."""
    cfg = cfg.with_context(contexts is not None)
    X, Y = training_samples(data, contexts, params, cfg, params.rng_seed)
    fp = layout_fingerprint(patch_layout(cfg, data[0][0].channels), params.geometry, n_classes)
    return srf_train(X, Y, params, n_classes, fp)


# --- prediction ---------------------------------------------------------------------------

def predict_scores(forest: SrfForest, X: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    offsets, table = forest.leaf_table()
    leaf_index = np.stack([tree.apply(X) + offsets[i] for i, tree in enumerate(forest.trees)])
    h, w = shape
    return K.vote_patches(leaf_index.astype(np.int64), table, h, w, forest.geometry.label_patch_side,
                          forest.n_classes)


def srf_predict(forest: SrfForest, img: MultiChannelImage, context: ProbabilityMap | None,
                cfg: FeatureConfig) -> ProbabilityMap:
    cfg = cfg.with_context(context is not None)
    fp = layout_fingerprint(patch_layout(cfg, img.channels), forest.geometry, forest.n_classes)
    if forest.fingerprint and fp != forest.fingerprint:
        raise ContractError("feature layout of the input does not match the one the forest was trained on")
    F = patch_feature_maps(img, context, forest.geometry.feature_patch_side, cfg)
    X = np.ascontiguousarray(F.reshape(F.shape[0], -1).T)
    if X.shape[1] != forest.n_features:
        raise ContractError(f"forest expects {forest.n_features} features, got {X.shape[1]}")
    return ProbabilityMap(normalize_float32(predict_scores(forest, X, img.shape)))


# --- serialisation ------------------------------------------------------------------------

BLOB_KIND = "srf-forest"


def forest_to_bytes(forest: SrfForest) -> bytes:
    arrays = {}
    for i, t in enumerate(forest.trees):
        for name in ("feature", "threshold", "left", "right", "leaf_id", "depth", "leaves"):
            arrays[f"t{i:03d}.{name}"] = getattr(t, name)
    p = forest.params
    meta = {"n_trees": len(forest.trees), "n_classes": forest.n_classes, "fingerprint": forest.fingerprint,
            "n_features": forest.n_features, "params": {k: getattr(p, k) for k in p.__dataclass_fields__}}
    return blob.dumps(BLOB_KIND, meta, arrays)


def forest_from_bytes(buf: bytes, expected_fingerprint: str | None = None) -> SrfForest:
    meta, arrays = blob.loads(buf, BLOB_KIND)
    if expected_fingerprint is not None and meta["fingerprint"] != expected_fingerprint:
        raise ContractError("stored forest was trained on an incompatible feature layout")
    trees = [Tree(*(arrays[f"t{i:03d}.{name}"] for name in
                    ("feature", "threshold", "left", "right", "leaf_id", "depth", "leaves")))
             for i in range(meta["n_trees"])]
    params = replace(SrfParams(), **meta["params"])
    return SrfForest(trees, meta["n_classes"], params.geometry, meta["fingerprint"], meta["n_features"], params)
