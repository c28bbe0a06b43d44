"""Superpixel Bayesian network: GMM feature likelihoods, edge-state coupling, loopy BP.

Layer 1 holds one label node per superpixel, layer 2 one binary node per
edge segment whose parents are the two superpixels it separates.  Feature
nodes (layers 3-4) are observed: superpixel features through per-class
diagonal GMMs, edge features through a binned edge-strength likelihood
P(strength | edge state).  Summing out each edge node leaves a pairwise
potential between adjacent superpixels, so inference runs as sum-product
on the superpixel adjacency graph.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp
from sklearn.cluster import kmeans_plusplus

from . import blob
from .features import FeatureConfig, superpixel_feature_matrix
from .grid import ContractError, LabelMap, MultiChannelImage, ProbabilityMap, normalize_float32
from .oversegment import EdgeMap, SlicParams, cached_slic, majority_label
from ._cache import LRU

PRIOR_FLOOR = 1e-12


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class BnParams:
    gmm_components: int = 3
    em_iterations: int = 100
    em_tol: float = 1e-5
    var_floor: float = 1e-6
    edge_true_given_diff: float = 0.8
    edge_true_given_same: float = 0.2
    bp_max_iters: int = 50
    bp_damping: float = 0.5
    bp_tol: float = 1e-4
    edge_bins: int = 16
    # exponent on the GMM likelihood in the unary potential
    likelihood_weight: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        for p in (self.edge_true_given_diff, self.edge_true_given_same):
            if not 0 < p < 1:
                raise ValueError("edge conditionals must lie in (0, 1)")
        if not 0 <= self.bp_damping < 1:
            raise ValueError("bp_damping must lie in [0, 1)")
        if self.gmm_components < 1 or self.em_iterations < 1 or self.bp_max_iters < 1:
            raise ValueError("component and iteration counts must be >= 1")
        if self.var_floor <= 0 or self.edge_bins < 1:
            raise ValueError("var_floor must be positive and edge_bins >= 1")
        if self.likelihood_weight <= 0:
            raise ValueError("likelihood_weight must be positive")


# --- diagonal Gaussian mixtures ---------------------------------------------------------

@dataclass
class DiagGmm:
    weights: np.ndarray     # (K,)
    means: np.ndarray       # (K, d)
    variances: np.ndarray   # (K, d)

    def component_log_density(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        d = X.shape[1]
        prec = 1.0 / self.variances
        quad = ((X[:, None, :] - self.means[None]) ** 2 * prec[None]).sum(axis=2)
        log_det = np.log(self.variances).sum(axis=1)
        return -0.5 * (quad + log_det[None] + d * np.log(2 * np.pi)) + np.log(self.weights)[None]

    def log_likelihood(self, X: np.ndarray) -> np.ndarray:
        return logsumexp(self.component_log_density(X), axis=1)


def _m_step(X, resp, var_floor):
    nk = resp.sum(axis=0)
    means = resp.T @ X / nk[:, None]
    var = resp.T @ (X ** 2) / nk[:, None] - means ** 2
    return nk / nk.sum(), means, np.maximum(var, var_floor)


def fit_gmm(X: np.ndarray, n_components: int, params: BnParams, seed: int) -> tuple[DiagGmm, list[float]]:
    """EM for a diagonal GMM.  Returns the model and the mean log-likelihood trace.

    A component that loses all responsibility is re-seeded once at the worst
    explained sample; if it empties again it is dropped.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    k = min(n_components, np.unique(X, axis=0).shape[0])
    centers, _ = kmeans_plusplus(X, k, random_state=seed % (2 ** 32))
    nearest = np.argmin(((X[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)
    resp = np.eye(k)[nearest]
    gmm = DiagGmm(*_m_step(X, resp, params.var_floor))
    reseeded = np.zeros(k, dtype=bool)
    trace: list[float] = []
    for _ in range(params.em_iterations):
        logp = gmm.component_log_density(X)
        ll = logsumexp(logp, axis=1)
        trace.append(float(ll.mean()))
        if len(trace) > 1 and trace[-1] - trace[-2] < params.em_tol:
            break
        resp = np.exp(logp - ll[:, None])
        empty = resp.sum(axis=0) < 1e-8
        if empty.any():
            worst = np.argsort(ll, kind="stable")
            for i, j in enumerate(np.flatnonzero(empty & ~reseeded)):
                resp[worst[i]] = 0.0
                resp[worst[i], j] = 1.0
                reseeded[j] = True
            keep = ~(empty & (resp.sum(axis=0) < 1e-8))
            resp, reseeded = resp[:, keep], reseeded[keep]
            # the likelihood may drop across a re-seed; the trace restarts
            trace.clear()
        gmm = DiagGmm(*_m_step(X, resp, params.var_floor))
    return gmm, trace


# --- belief propagation ---------------------------------------------------------------

def loopy_bp(unary: np.ndarray, edges: np.ndarray, pairwise: np.ndarray, max_iters: int = 50,
             damping: float = 0.5, tol: float = 1e-4) -> tuple[np.ndarray, int, bool]:
    """Damped synchronous sum-product on a pairwise MRF.

    unary: (N, L) nonnegative potentials; edges: (E, 2); pairwise: (E, L, L)
    with ``pairwise[e, a, b]`` the potential of (state a at edges[e, 0],
    state b at edges[e, 1]).  Returns (marginals, iterations, converged).
    """
    unary = np.asarray(unary, dtype=np.float64)
    n, L = unary.shape
    edges = np.asarray(edges, dtype=np.intp).reshape(-1, 2)
    with np.errstate(divide="ignore"):
        log_unary = np.log(unary / unary.sum(axis=1, keepdims=True))
    if edges.shape[0] == 0:
        return np.exp(log_unary), 0, True
    E = edges.shape[0]
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    rev = np.concatenate([np.arange(E, 2 * E), np.arange(E)])
    with np.errstate(divide="ignore"):
        log_pair = np.log(np.concatenate([pairwise, pairwise.transpose(0, 2, 1)]))
    msg = np.full((2 * E, L), 1.0 / L)

    def node_sums(log_msg):
        s = log_unary.copy()
        for k in range(L):
            s[:, k] += np.bincount(dst, weights=log_msg[:, k], minlength=n)
        return s

    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        log_msg = np.log(msg)
        s = node_sums(log_msg)
        pre = s[src] - log_msg[rev]
        new = logsumexp(pre[:, :, None] + log_pair, axis=1)
        new = np.exp(new - logsumexp(new, axis=1, keepdims=True))
        new = (1.0 - damping) * new + damping * msg
        new /= new.sum(axis=1, keepdims=True)
        delta = np.abs(new - msg).max()
        msg = new
        if delta < tol:
            converged = True
            break
    s = node_sums(np.log(msg))
    marg = np.exp(s - logsumexp(s, axis=1, keepdims=True))
    return marg, it, converged


def exact_marginals(unary: np.ndarray, edges: np.ndarray, pairwise: np.ndarray) -> np.ndarray:
    """Brute-force marginals over all L**N joint states (small graphs only)."""
    unary = np.asarray(unary, dtype=np.float64)
    n, L = unary.shape
    states = np.array(np.unravel_index(np.arange(L ** n), (L,) * n)).T
    logp = np.log(unary[np.arange(n), states]).sum(axis=1)
    for e, (a, b) in enumerate(np.asarray(edges).reshape(-1, 2)):
        logp += np.log(pairwise[e][states[:, a], states[:, b]])
    p = np.exp(logp - logp.max())
    p /= p.sum()
    marg = np.zeros((n, L))
    for i in range(n):
        marg[i] = np.bincount(states[:, i], weights=p, minlength=L)
    return marg


# --- model ---------------------------------------------------------------------------------

def edge_strengths(img: MultiChannelImage, edge_map: EdgeMap) -> np.ndarray:
    """Mean absolute intensity step (averaged over channels) across each edge's pixel pairs."""
    if edge_map.n_edges == 0:
        return np.zeros(0)
    flat = img.data.reshape(img.channels, -1).astype(np.float64)
    p, q = edge_map.boundary_pairs[:, 0], edge_map.boundary_pairs[:, 1]
    step = np.abs(flat[:, p] - flat[:, q]).mean(axis=0)
    sums = np.bincount(edge_map.boundary_edge, weights=step, minlength=edge_map.n_edges)
    return sums / np.bincount(edge_map.boundary_edge, minlength=edge_map.n_edges)


@dataclass
class SuperpixelData:
    """Observed BN evidence for one image under one partition."""

    edge_map: EdgeMap
    features: np.ndarray     # (N, d)
    strengths: np.ndarray    # (E,)


_SP_CACHE = LRU(96)


def superpixel_data(img: MultiChannelImage, slic_params: SlicParams, cfg: FeatureConfig,
                    reference_channel: int = 0) -> SuperpixelData:
    cfg = cfg.with_context(False)

    def build():
        em = cached_slic(img, reference_channel, slic_params)
        feats = superpixel_feature_matrix(img, em.assignment, em.edges, None, cfg)
        return SuperpixelData(em, feats, edge_strengths(img, em))

    return _SP_CACHE.get((img.digest(), slic_params, cfg.bank_key(), reference_channel), build)


@dataclass
class BnModel:
    n_classes: int
    feature_mean: np.ndarray
    feature_std: np.ndarray
    gmms: list[DiagGmm]
    strength_edges: np.ndarray   # (B+1,) bin edges
    strength_given_edge: np.ndarray  # (2, B): row 0 e=0, row 1 e=1
    params: BnParams = field(default_factory=BnParams)
    slic: SlicParams = field(default_factory=SlicParams)

    @property
    def n_features(self) -> int:
        return self.feature_mean.shape[0]

    @property
    def likelihood_weight(self) -> float:
        return self.params.likelihood_weight

    def standardize(self, feats: np.ndarray) -> np.ndarray:
        return (np.asarray(feats, dtype=np.float64) - self.feature_mean) / self.feature_std

    def class_log_likelihood(self, feats: np.ndarray) -> np.ndarray:
        z = self.standardize(feats)
        return np.stack([g.log_likelihood(z) for g in self.gmms], axis=1)

    def edge_evidence(self, strengths: np.ndarray) -> np.ndarray:
        """(E, 2) likelihoods P(strength | e=0), P(strength | e=1)."""
        b = np.clip(np.searchsorted(self.strength_edges, strengths, side="right") - 1,
                    0, self.strength_given_edge.shape[1] - 1)
        return self.strength_given_edge[:, b].T


def bn_train(training: list[tuple[SuperpixelData, np.ndarray]], n_classes: int,
             params: BnParams = BnParams(), slic_params: SlicParams = SlicParams()) -> BnModel:
    """Fit per-class GMM likelihoods and the edge-strength histograms.

    ``training`` pairs each image's superpixel evidence with its per-superpixel
    ground-truth labels.
    """
    if not training:
        raise TrainingError("no training images")
    feats = np.concatenate([sd.features for sd, _ in training])
    labels = np.concatenate([np.asarray(lab) for _, lab in training])
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    z = (feats - mean) / std
    gmms = []
    for c in range(n_classes):
        rows = z[labels == c]
        if rows.shape[0] == 0:
            raise TrainingError(f"class {c} has no training superpixels")
        seed = int(np.random.SeedSequence([params.rng_seed, c]).generate_state(1)[0])
        gmms.append(fit_gmm(rows, params.gmm_components, params, seed)[0])

    strengths = np.concatenate([sd.strengths for sd, _ in training])
    is_boundary = np.concatenate([
        (np.asarray(lab)[sd.edge_map.edges[:, 0]] != np.asarray(lab)[sd.edge_map.edges[:, 1]])
        for sd, lab in training]).astype(bool)
    top = np.quantile(strengths, 0.99) if strengths.size else 1.0
    bin_edges = np.linspace(0.0, max(top, 1e-12), params.edge_bins + 1)
    bins = np.clip(np.searchsorted(bin_edges, strengths, side="right") - 1, 0, params.edge_bins - 1)
    hist = np.ones((2, params.edge_bins))  # Laplace smoothing
    np.add.at(hist, (is_boundary.astype(np.intp), bins), 1.0)
    hist /= hist.sum(axis=1, keepdims=True)
    return BnModel(n_classes, mean, std, gmms, bin_edges, hist, params, slic_params)


def pooled_prior(prior: ProbabilityMap | None, edge_map: EdgeMap, n_classes: int) -> np.ndarray:
    """Per-superpixel class prior: pixel-mean of the prior map, or uniform."""
    n = edge_map.n_superpixels
    if prior is None:
        return np.full((n, n_classes), 1.0 / n_classes)
    if prior.shape != edge_map.shape or prior.n_classes != n_classes:
        raise ContractError("prior map does not match the partition / class count")
    flat = edge_map.assignment.ravel()
    counts = np.bincount(flat, minlength=n)
    pooled = np.stack([np.bincount(flat, weights=prior.values[k].ravel().astype(np.float64), minlength=n)
                       for k in range(n_classes)], axis=1) / counts[:, None]
    return pooled / pooled.sum(axis=1, keepdims=True)


def edge_potentials(model: BnModel, strengths: np.ndarray) -> np.ndarray:
    """(E, L, L) pairwise potentials with the edge state summed out."""
    L = model.n_classes
    ev = model.edge_evidence(strengths)
    p_true = np.full((L, L), model.params.edge_true_given_diff)
    np.fill_diagonal(p_true, model.params.edge_true_given_same)
    return ev[:, 1, None, None] * p_true[None] + ev[:, 0, None, None] * (1.0 - p_true[None])


def superpixel_posteriors(model: BnModel, data: SuperpixelData, prior: ProbabilityMap | None) -> np.ndarray:
    em = data.edge_map
    if data.features.shape != (em.n_superpixels, model.n_features):
        raise ContractError("superpixel features inconsistent with the partition or the model")
    if data.strengths.shape != (em.n_edges,):
        raise ContractError("edge strengths inconsistent with the partition")
    log_prior = np.log(np.maximum(pooled_prior(prior, em, model.n_classes), PRIOR_FLOOR))
    log_unary = log_prior + model.likelihood_weight * model.class_log_likelihood(data.features)
    unary = np.exp(log_unary - log_unary.max(axis=1, keepdims=True))
    p = model.params
    marg, _, _ = loopy_bp(unary, em.edges, edge_potentials(model, data.strengths),
                          p.bp_max_iters, p.bp_damping, p.bp_tol)
    return marg


def rasterize(posteriors: np.ndarray, edge_map: EdgeMap) -> ProbabilityMap:
    return ProbabilityMap(normalize_float32(posteriors[edge_map.assignment].transpose(2, 0, 1)))


def bn_infer(model: BnModel, data: SuperpixelData, prior: ProbabilityMap | None) -> ProbabilityMap:
    return rasterize(superpixel_posteriors(model, data, prior), data.edge_map)


def fit_bn(dataset: list[tuple[MultiChannelImage, LabelMap]], n_classes: int, params: BnParams,
           slic_params: SlicParams, cfg: FeatureConfig) -> BnModel:
    training = []
    for img, labels in dataset:
        sd = superpixel_data(img, slic_params, cfg)
        training.append((sd, majority_label(sd.edge_map, labels)))
    return bn_train(training, n_classes, params, slic_params)


def bn_predict(model: BnModel, img: MultiChannelImage, prior: ProbabilityMap | None,
               cfg: FeatureConfig) -> ProbabilityMap:
    return bn_infer(model, superpixel_data(img, model.slic, cfg), prior)


# --- serialisation ---------------------------------------------------------------------------

BLOB_KIND = "bn-model"


def model_to_bytes(model: BnModel) -> bytes:
    arrays = {"feature_mean": model.feature_mean, "feature_std": model.feature_std,
              "strength_edges": model.strength_edges, "strength_given_edge": model.strength_given_edge}
    for c, g in enumerate(model.gmms):
        arrays[f"c{c:02d}.weights"] = g.weights
        arrays[f"c{c:02d}.means"] = g.means
        arrays[f"c{c:02d}.variances"] = g.variances
    meta = {"n_classes": model.n_classes,
            "params": {k: getattr(model.params, k) for k in model.params.__dataclass_fields__},
            "slic": {k: getattr(model.slic, k) for k in model.slic.__dataclass_fields__}}
    return blob.dumps(BLOB_KIND, meta, arrays)


def model_from_bytes(buf: bytes) -> BnModel:
    meta, a = blob.loads(buf, BLOB_KIND)
    gmms = [DiagGmm(a[f"c{c:02d}.weights"], a[f"c{c:02d}.means"], a[f"c{c:02d}.variances"])
            for c in range(meta["n_classes"])]
    return BnModel(meta["n_classes"], a["feature_mean"], a["feature_std"], gmms, a["strength_edges"],
                   a["strength_given_edge"], replace(BnParams(), **meta["params"]),
                   replace(SlicParams(), **meta["slic"]))
