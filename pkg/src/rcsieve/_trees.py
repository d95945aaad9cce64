"""Numba kernels for honest CART forests.

A forest is stored flat: node ``j`` of tree ``b`` lives at
``offsets[b] + j`` and child pointers are absolute.  Leaves have
``feature == -1``.  Splits are chosen on a scalar target ``y``; each leaf
stores the estimation-half means of the ``q`` columns of ``yl`` (usually
``yl = y[:, None]``).
"""

import numpy as np
from numba import config, njit, prange

# avoid probing an outdated TBB install on every first parallel launch
config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

LEAF = -1


@njit(cache=True)
def _stable_partition(order, lo, hi, goes_left, buf):
    """Stable partition of ``order[lo:hi]`` by ``goes_left``; returns the cut."""
    a = lo
    nb = 0
    for i in range(lo, hi):
        v = order[i]
        if goes_left[v]:
            order[a] = v
            a += 1
        else:
            buf[nb] = v
            nb += 1
    for i in range(nb):
        order[a + i] = buf[i]
    return a


@njit(cache=True)
def _local_orders(col_order, rows, pos):
    """Local ids ``0..len(rows)-1`` sorted by each column, via the global order."""
    d, n = col_order.shape
    m = rows.shape[0]
    for i in range(m):
        pos[rows[i]] = i
    out = np.empty((d, m), np.int64)
    for f in range(d):
        c = 0
        for i in range(n):
            p = pos[col_order[f, i]]
            if p >= 0:
                out[f, c] = p
                c += 1
    for i in range(m):
        pos[rows[i]] = -1
    return out


@njit(cache=True)
def _grow_tree(X, y, yl, col_order, struct, est, min_leaf, mtry, honest,
               feature, threshold, left, right, value, depth, base, pos):
    """Grow one tree into preallocated slots starting at ``base``.

    Split search reads responses of ``struct`` rows only; responses of ``est``
    rows enter solely through the leaf means.  Each feature keeps a list of
    local row ids sorted by that feature; a node owns the same contiguous
    range in every list, and splits stable-partition the lists.  Estimation
    rows only need per-node extremes, so they live in one unsorted range.  The lists
    are read off ``col_order``, the per-column argsort of ``X``.  ``pos`` is
    scratch of length ``len(X)`` filled with -1.  Returns the number of nodes
    written.
    """
    d = X.shape[1]
    ns_all = struct.shape[0]
    ne_all = est.shape[0]
    xs = np.empty((d, ns_all))
    for f in range(d):
        for i in range(ns_all):
            xs[f, i] = X[struct[i], f]
    ys = np.empty(ns_all)
    for i in range(ns_all):
        ys[i] = y[struct[i]]
    s_order = _local_orders(col_order, struct, pos)
    if honest:
        xe = np.empty((d, ne_all))
        for f in range(d):
            for i in range(ne_all):
                xe[f, i] = X[est[i], f]
    else:
        xe = np.empty((d, 1))
    e_idx = np.arange(max(ne_all, 1))
    e_min = np.empty(d)
    e_max = np.empty(d)
    s_left = np.zeros(ns_all, np.bool_)
    buf = np.empty(max(ns_all, ne_all, 1), np.int64)
    feats = np.arange(d)

    cap = 2 * ns_all + 1
    stack = np.empty((cap, 6), np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = ns_all
    stack[0, 3] = 0
    stack[0, 4] = ne_all
    stack[0, 5] = 0
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node = stack[top, 0]
        s0 = stack[top, 1]
        s1 = stack[top, 2]
        e0 = stack[top, 3]
        e1 = stack[top, 4]
        dep = stack[top, 5]
        j = base + node
        depth[j] = dep
        ns = s1 - s0
        ne = e1 - e0

        best_f = -1
        best_thr = 0.0
        if ns >= 2 * min_leaf:
            tot = 0.0
            first = s_order[0, s0]
            ymin = ys[first]
            ymax = ymin
            for i in range(s0, s1):
                v = ys[s_order[0, i]]
                tot += v
                if v < ymin:
                    ymin = v
                if v > ymax:
                    ymax = v
            if ymax > ymin:
                # centre at the node mean so the criterion ignores the level of y
                mu = tot / ns
                ss = 0.0
                for i in range(s0, s1):
                    v = ys[s_order[0, i]] - mu
                    ss += v * v
                # a candidate must beat the incumbent by a margin, so exact ties
                # (several features giving the same partition) go to the first one
                tol = 1e-9 * ss
                best = 0.0
                for a in range(mtry):
                    b = a + np.random.randint(d - a)
                    tmp = feats[a]
                    feats[a] = feats[b]
                    feats[b] = tmp
                if honest:
                    for a in range(mtry):
                        f = feats[a]
                        lo_e = np.inf
                        hi_e = -np.inf
                        for i in range(e0, e1):
                            v = xe[f, e_idx[i]]
                            if v < lo_e:
                                lo_e = v
                            if v > hi_e:
                                hi_e = v
                        e_min[f] = lo_e
                        e_max[f] = hi_e
                for a in range(mtry):
                    f = feats[a]
                    cum = 0.0
                    prev = xs[f, s_order[f, s0]]
                    for i in range(1, ns):
                        cur_id = s_order[f, s0 + i]
                        cum += ys[s_order[f, s0 + i - 1]] - mu
                        cur = xs[f, cur_id]
                        if cur == prev:
                            continue
                        lo_x = prev
                        prev = cur
                        if i < min_leaf or ns - i < min_leaf:
                            continue
                        thr = 0.5 * (lo_x + cur)
                        # both estimation children must be nonempty
                        if honest and not (e_min[f] <= thr < e_max[f]):
                            continue
                        # between-child sum of squares; the centred total is zero
                        score = cum * cum * (1.0 / i + 1.0 / (ns - i))
                        if score > best + tol:
                            best = score
                            best_f = f
                            best_thr = thr

        if best_f < 0:
            feature[j] = LEAF
            for o in range(yl.shape[1]):
                acc = 0.0
                if honest:
                    for i in range(e0, e1):
                        acc += yl[est[e_idx[i]], o]
                    value[j, o] = acc / ne
                else:
                    for i in range(s0, s1):
                        acc += yl[struct[s_order[0, i]], o]
                    value[j, o] = acc / ns
            continue

        for i in range(s0, s1):
            v = s_order[0, i]
            s_left[v] = xs[best_f, v] <= best_thr
        s_mid = _stable_partition(s_order[0], s0, s1, s_left, buf)
        # other lists only matter inside children that may split again
        if max(s_mid - s0, s1 - s_mid) >= 2 * min_leaf:
            for f in range(1, d):
                _stable_partition(s_order[f], s0, s1, s_left, buf)
        e_mid = e0
        if honest:
            a = e0
            b = e1 - 1
            while a <= b:
                if xe[best_f, e_idx[a]] <= best_thr:
                    a += 1
                else:
                    tmp = e_idx[a]
                    e_idx[a] = e_idx[b]
                    e_idx[b] = tmp
                    b -= 1
            e_mid = a
        feature[j] = best_f
        threshold[j] = best_thr
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[j] = base + lc
        right[j] = base + rc
        stack[top, 0] = lc
        stack[top, 1] = s0
        stack[top, 2] = s_mid
        stack[top, 3] = e0
        stack[top, 4] = e_mid
        stack[top, 5] = dep + 1
        top += 1
        stack[top, 0] = rc
        stack[top, 1] = s_mid
        stack[top, 2] = s1
        stack[top, 3] = e_mid
        stack[top, 4] = e1
        stack[top, 5] = dep + 1
        top += 1
    return n_nodes


@njit(cache=True, parallel=True)
def grow_forest(X, y, yl, group_seeds, tree_seeds, group_size, half_size, sub_size,
                min_leaf, mtry, honest):
    """Grow ``len(tree_seeds)`` trees; tree ``b`` belongs to group ``b // group_size``.

    Each group draws a half-sample of ``half_size`` rows; each tree draws
    ``sub_size`` rows from its group's half-sample and, when honest, splits
    them into a structure half and an estimation half.
    Returns raw per-tree slot arrays plus the node counts.
    """
    n = X.shape[0]
    n_trees = tree_seeds.shape[0]
    n_struct = (sub_size + 1) // 2 if honest else sub_size
    cap = 2 * n_struct + 1
    feature = np.full(n_trees * cap, LEAF, np.int32)
    threshold = np.zeros(n_trees * cap)
    left = np.full(n_trees * cap, -1, np.int64)
    right = np.full(n_trees * cap, -1, np.int64)
    value = np.zeros((n_trees * cap, yl.shape[1]))
    depth = np.zeros(n_trees * cap, np.int32)
    counts = np.zeros(n_trees, np.int64)
    struct_sets = np.empty((n_trees, n_struct), np.int64)
    est_size = sub_size - n_struct if honest else 0
    est_sets = np.empty((n_trees, max(est_size, 1)), np.int64)
    d = X.shape[1]
    col_order = np.empty((d, n), np.int64)
    for f in range(d):
        col_order[f] = np.argsort(X[:, f], kind="mergesort")
    for b in prange(n_trees):
        pos = np.full(n, -1, np.int64)
        np.random.seed(group_seeds[b // group_size])
        half = np.random.permutation(n)[:half_size]
        np.random.seed(tree_seeds[b])
        sub = half[np.random.permutation(half_size)[:sub_size]]
        struct = sub[:n_struct].copy()
        if honest:
            est = sub[n_struct:].copy()
        else:
            est = struct.copy()
        struct_sets[b, :] = struct
        if honest:
            est_sets[b, :] = est
        counts[b] = _grow_tree(X, y, yl, col_order, struct, est, min_leaf, mtry, honest,
                               feature, threshold, left, right, value, depth, b * cap, pos)
    return feature, threshold, left, right, value, depth, counts, cap, struct_sets, est_sets


@njit(cache=True)
def compact(feature, threshold, left, right, value, depth, counts, cap):
    """Drop unused slots; returns compact arrays and per-tree offsets."""
    n_trees = counts.shape[0]
    offsets = np.zeros(n_trees + 1, np.int64)
    for b in range(n_trees):
        offsets[b + 1] = offsets[b] + counts[b]
    total = offsets[-1]
    f2 = np.empty(total, np.int32)
    t2 = np.empty(total)
    l2 = np.empty(total, np.int64)
    r2 = np.empty(total, np.int64)
    v2 = np.empty((total, value.shape[1]))
    d2 = np.empty(total, np.int32)
    for b in range(n_trees):
        shift = b * cap - offsets[b]
        for j in range(counts[b]):
            src = b * cap + j
            dst = offsets[b] + j
            f2[dst] = feature[src]
            t2[dst] = threshold[src]
            v2[dst] = value[src]
            d2[dst] = depth[src]
            if feature[src] >= 0:
                l2[dst] = left[src] - shift
                r2[dst] = right[src] - shift
            else:
                l2[dst] = -1
                r2[dst] = -1
    return f2, t2, l2, r2, v2, d2, offsets


@njit(cache=True, parallel=True)
def predict_trees(feature, threshold, left, right, value, offsets, Xq):
    """Per-tree predictions, shape ``(len(Xq), n_trees, q)``."""
    n_trees = offsets.shape[0] - 1
    nq = Xq.shape[0]
    out = np.empty((nq, n_trees, value.shape[1]))
    for b in prange(n_trees):
        root = offsets[b]
        for q in range(nq):
            j = root
            while feature[j] >= 0:
                if Xq[q, feature[j]] <= threshold[j]:
                    j = left[j]
                else:
                    j = right[j]
            out[q, b, :] = value[j]
    return out


@njit(cache=True, parallel=True)
def predict_trees_w_averaged(feature, threshold, left, right, value, offsets,
                             Xq, w_col, w_sorted):
    """Per-tree averages over ``w`` of ``tree(x with column w_col set to w)``.

    Equals ``mean_r tree(x, W_r)`` over the sample ``w_sorted`` exactly: the
    tree is traversed once per query with an interval for the ``w`` coordinate
    and leaf values are weighted by the empirical mass of that interval.
    """
    n_trees = offsets.shape[0] - 1
    nq = Xq.shape[0]
    nw = w_sorted.shape[0]
    n_out = value.shape[1]
    out = np.zeros((nq, n_trees, n_out))
    for b in prange(n_trees):
        root = offsets[b]
        size = offsets[b + 1] - root
        st_node = np.empty(size + 1, np.int64)
        st_lo = np.empty(size + 1)
        st_hi = np.empty(size + 1)
        for q in range(nq):
            top = 0
            st_node[0] = root
            st_lo[0] = -np.inf
            st_hi[0] = np.inf
            top = 1
            acc = np.zeros(n_out)
            while top > 0:
                top -= 1
                j = st_node[top]
                lo = st_lo[top]
                hi = st_hi[top]
                f = feature[j]
                if f < 0:
                    c_hi = nw if hi == np.inf else np.searchsorted(w_sorted, hi, side="right")
                    c_lo = 0 if lo == -np.inf else np.searchsorted(w_sorted, lo, side="right")
                    for o in range(n_out):
                        acc[o] += value[j, o] * (c_hi - c_lo)
                elif f == w_col:
                    thr = threshold[j]
                    if lo < thr:
                        st_node[top] = left[j]
                        st_lo[top] = lo
                        st_hi[top] = min(hi, thr)
                        top += 1
                    if hi > thr:
                        st_node[top] = right[j]
                        st_lo[top] = max(lo, thr)
                        st_hi[top] = hi
                        top += 1
                else:
                    st_node[top] = left[j] if Xq[q, f] <= threshold[j] else right[j]
                    st_lo[top] = lo
                    st_hi[top] = hi
                    top += 1
            out[q, b, :] = acc / nw
    return out


@njit(cache=True)
def split_weights(feature, depth, d, decay):
    out = np.zeros(d)
    for j in range(feature.shape[0]):
        f = feature[j]
        if f >= 0:
            out[f] += decay ** depth[j]
    return out
