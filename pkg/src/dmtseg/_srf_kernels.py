"""Compiled kernels for structured-forest training, routing and patch voting."""
import numpy as np
from numba import njit

LEAF = -1


@njit(cache=True)
def _entropy_bits(counts, total):
    h = 0.0
    for v in counts:
        if v > 0:
            p = v / total
            h -= p * np.log2(p)
    return h


@njit(cache=True)
def _choose_features(d, k):
    perm = np.arange(d)
    for i in range(k):
        j = i + np.random.randint(d - i)
        perm[i], perm[j] = perm[j], perm[i]
    return perm[:k]


@njit(cache=True)
def build_tree(X, Y, sample_idx, n_classes, center, seed, max_depth, min_leaf,
               n_features_try, n_thresholds):
    """Grow one structured tree.

    X: (n, d) float32 features; Y: (n, P) label patches (row-major); sample_idx:
    bootstrap indices into X.  At every node one label-patch position p is
    drawn and samples are classed by (label at centre, label at p); the split
    maximising information gain on that derived class is kept.

    Returns node arrays (feature, threshold, left, right, leaf_id, depth) and
    leaf label counts (n_leaves, P, n_classes).
    """
    np.random.seed(seed)
    n = sample_idx.shape[0]
    d = X.shape[1]
    P = Y.shape[1]
    n_derived = n_classes * n_classes
    cap = 2 * n + 1
    feature = np.full(cap, LEAF, dtype=np.int32)
    threshold = np.zeros(cap, dtype=np.float32)
    left = np.full(cap, -1, dtype=np.int32)
    right = np.full(cap, -1, dtype=np.int32)
    leaf_id = np.full(cap, -1, dtype=np.int32)
    depth_of = np.zeros(cap, dtype=np.int32)
    leaf_counts = np.zeros((n // max(min_leaf, 1) + 2, P, n_classes), dtype=np.float64)

    idx = sample_idx.copy()
    stack_node = np.empty(cap, dtype=np.int32)
    stack_lo = np.empty(cap, dtype=np.int64)
    stack_hi = np.empty(cap, dtype=np.int64)
    sp = 0
    stack_node[0], stack_lo[0], stack_hi[0] = 0, 0, n
    sp = 1
    n_nodes = 1
    n_leaves = 0

    derived = np.empty(n, dtype=np.int64)
    vals = np.empty(n, dtype=np.float32)
    bins = np.empty(n, dtype=np.int64)
    parent_counts = np.zeros(n_derived, dtype=np.float64)
    hist = np.zeros((n_thresholds + 1, n_derived), dtype=np.float64)
    left_counts = np.zeros(n_derived, dtype=np.float64)
    right_counts = np.zeros(n_derived, dtype=np.float64)
    thr = np.empty(n_thresholds, dtype=np.float32)

    while sp > 0:
        sp -= 1
        node, lo, hi = stack_node[sp], stack_lo[sp], stack_hi[sp]
        m = hi - lo
        pos = np.random.randint(P)
        parent_counts[:] = 0.0
        for i in range(m):
            s = idx[lo + i]
            c = Y[s, center] * n_classes + Y[s, pos]
            derived[i] = c
            parent_counts[c] += 1.0
        n_present = 0
        for c in range(n_derived):
            if parent_counts[c] > 0:
                n_present += 1

        best_gain = 1e-12
        best_f = -1
        best_t = np.float32(0.0)
        if depth_of[node] < max_depth and m >= 2 * min_leaf and n_present > 1:
            h_parent = _entropy_bits(parent_counts, m)
            feats = _choose_features(d, n_features_try)
            for f in feats:
                for i in range(m):
                    vals[i] = X[idx[lo + i], f]
                srt = np.sort(vals[:m])
                n_thr = 0
                for t in range(1, n_thresholds + 1):
                    q = srt[(t * m) // (n_thresholds + 1)]
                    if q == srt[m - 1]:
                        continue
                    if n_thr == 0 or q > thr[n_thr - 1]:
                        thr[n_thr] = q
                        n_thr += 1
                if n_thr == 0:
                    continue
                hist[: n_thr + 1, :] = 0.0
                for i in range(m):
                    b = np.searchsorted(thr[:n_thr], vals[i])  # count of thresholds < v
                    bins[i] = b
                    hist[b, derived[i]] += 1.0
                left_counts[:] = 0.0
                n_left = 0.0
                for t in range(n_thr):
                    for c in range(n_derived):
                        left_counts[c] += hist[t, c]
                    n_left = 0.0
                    for c in range(n_derived):
                        n_left += left_counts[c]
                    n_right = m - n_left
                    if n_left < min_leaf or n_right < min_leaf:
                        continue
                    for c in range(n_derived):
                        right_counts[c] = parent_counts[c] - left_counts[c]
                    gain = (h_parent - (n_left / m) * _entropy_bits(left_counts, n_left)
                            - (n_right / m) * _entropy_bits(right_counts, n_right))
                    if gain > best_gain:
                        best_gain = gain
                        best_f = f
                        best_t = thr[t]

        if best_f < 0:
            leaf = n_leaves
            n_leaves += 1
            leaf_id[node] = leaf
            for i in range(m):
                s = idx[lo + i]
                for p in range(P):
                    leaf_counts[leaf, p, Y[s, p]] += 1.0
            continue

        # partition idx[lo:hi] so samples with x <= t come first
        a, b = lo, hi - 1
        while a <= b:
            if X[idx[a], best_f] <= best_t:
                a += 1
            else:
                tmp = idx[a]
                idx[a] = idx[b]
                idx[b] = tmp
                b -= 1
        feature[node] = best_f
        threshold[node] = best_t
        l_node, r_node = n_nodes, n_nodes + 1
        n_nodes += 2
        left[node], right[node] = l_node, r_node
        depth_of[l_node] = depth_of[node] + 1
        depth_of[r_node] = depth_of[node] + 1
        # push right first so the left subtree is grown first
        stack_node[sp], stack_lo[sp], stack_hi[sp] = r_node, a, hi
        sp += 1
        stack_node[sp], stack_lo[sp], stack_hi[sp] = l_node, lo, a
        sp += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), leaf_id[:n_nodes].copy(), depth_of[:n_nodes].copy(),
            leaf_counts[:n_leaves].copy())


@njit(cache=True)
def route(X, feature, threshold, left, right, leaf_id):
    n = X.shape[0]
    out = np.empty(n, dtype=np.int32)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = leaf_id[node]
    return out


@njit(cache=True)
def vote_patches(leaf_index, leaf_dists, height, width, side, n_classes):
    """Accumulate leaf label-patch distributions over each pixel's footprint.

    leaf_index: (T, H*W) global leaf ids per tree and pixel; leaf_dists:
    (n_leaves_total, side*side, n_classes).  Footprints are cropped at the
    image border.
    """
    acc = np.zeros((n_classes, height, width), dtype=np.float64)
    off = side // 2
    n_trees = leaf_index.shape[0]
    for r in range(height):
        for c in range(width):
            pix = r * width + c
            for t in range(n_trees):
                leaf = leaf_index[t, pix]
                for dy in range(side):
                    rr = r - off + dy
                    if rr < 0 or rr >= height:
                        continue
                    for dx in range(side):
                        cc = c - off + dx
                        if cc < 0 or cc >= width:
                            continue
                        p = dy * side + dx
                        for k in range(n_classes):
                            acc[k, rr, cc] += leaf_dists[leaf, p, k]
    return acc
