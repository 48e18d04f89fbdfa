"""Numba kernels for weighted CART regression trees.

Trees are stored as flat node arrays: ``feat[i] < 0`` marks a leaf, otherwise
samples with ``x[feat[i]] <= thr[i]`` go to ``left[i]``.  Bootstrap samples
are represented by integer multiplicities so one presort of the training
matrix serves every tree of a forest.
"""
from __future__ import annotations

import numpy as np
from numba import njit


def max_nodes(max_depth: int) -> int:
    return 2 ** (max_depth + 1) - 1


@njit(cache=True)
def presort(X):
    n, F = X.shape
    order = np.empty((F, n), dtype=np.int64)
    for f in range(F):
        order[f] = np.argsort(X[:, f], kind="mergesort")
    return order


@njit(cache=True)
def build_tree(X, y, order, weights, max_depth, min_leaf, feat_keys, mtry,
               feat, thr, left, right, value):
    """Grow one tree into the preallocated node arrays; returns node count.

    ``feat_keys`` is a ``(max_nodes, F)`` array of random keys used to pick
    ``mtry`` candidate features per node (ignored when ``mtry >= F``).
    """
    n, F = X.shape
    n_active = 0
    for i in range(n):
        if weights[i] > 0:
            n_active += 1
    # per-feature sorted lists of active samples
    sidx = np.empty((F, n_active), dtype=np.int64)
    for f in range(F):
        c = 0
        for j in range(n):
            s = order[f, j]
            if weights[s] > 0:
                sidx[f, c] = s
                c += 1
    buf = np.empty(n_active, dtype=np.int64)
    goes_left = np.zeros(n, dtype=np.bool_)
    cand = np.arange(F)

    cap = feat.shape[0]
    q_node = np.empty(cap, dtype=np.int64)
    q_start = np.empty(cap, dtype=np.int64)
    q_end = np.empty(cap, dtype=np.int64)
    q_depth = np.empty(cap, dtype=np.int64)
    head = 0
    tail = 1
    q_node[0] = 0
    q_start[0] = 0
    q_end[0] = n_active
    q_depth[0] = 0
    n_nodes = 1

    while head < tail:
        node = q_node[head]
        start = q_start[head]
        end = q_end[head]
        depth = q_depth[head]
        head += 1

        S = 0.0
        W = 0.0
        for j in range(start, end):
            s = sidx[0, j]
            S += weights[s] * y[s]
            W += weights[s]
        value[node] = S / W
        feat[node] = -1
        left[node] = -1
        right[node] = -1
        if depth >= max_depth or W < 2 * min_leaf:
            continue

        if mtry < F:
            keys = feat_keys[node]
            cand = np.argsort(keys)[:mtry]
            cand = np.sort(cand)

        parent = S * S / W
        best_gain = parent * (1.0 + 1e-12) + 1e-300
        best_f = -1
        best_thr = 0.0
        for ci in range(cand.shape[0]):
            f = cand[ci]
            SL = 0.0
            WL = 0.0
            for j in range(start, end - 1):
                s = sidx[f, j]
                SL += weights[s] * y[s]
                WL += weights[s]
                a = X[s, f]
                b = X[sidx[f, j + 1], f]
                if a == b:
                    continue
                WR = W - WL
                if WL < min_leaf or WR < min_leaf:
                    continue
                SR = S - SL
                gain = SL * SL / WL + SR * SR / WR
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    t = a + (b - a) * 0.5
                    if t >= b:
                        t = a
                    best_thr = t
        if best_f < 0 or n_nodes + 2 > cap:
            continue

        for j in range(start, end):
            s = sidx[0, j]
            goes_left[s] = X[s, best_f] <= best_thr
        n_left = 0
        for f in range(F):
            cl = 0
            cr = 0
            for j in range(start, end):
                s = sidx[f, j]
                if goes_left[s]:
                    cl += 1
                else:
                    buf[cr] = s
                    cr += 1
            # stable partition: left block first, then right block
            pos = start
            for j in range(start, end):
                s = sidx[f, j]
                if goes_left[s]:
                    sidx[f, pos] = s
                    pos += 1
            for j in range(cr):
                sidx[f, pos + j] = buf[j]
            n_left = cl

        feat[node] = best_f
        thr[node] = best_thr
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        q_node[tail] = lc
        q_start[tail] = start
        q_end[tail] = start + n_left
        q_depth[tail] = depth + 1
        tail += 1
        q_node[tail] = rc
        q_start[tail] = start + n_left
        q_end[tail] = end
        q_depth[tail] = depth + 1
        tail += 1
    return n_nodes


@njit(cache=True)
def predict_forest(X, feat, thr, left, right, value):
    """Mean over trees; node arrays are ``(n_trees, nodes)``."""
    R = X.shape[0]
    T = feat.shape[0]
    out = np.empty(R)
    for r in range(R):
        acc = 0.0
        for t in range(T):
            node = 0
            while feat[t, node] >= 0:
                if X[r, feat[t, node]] <= thr[t, node]:
                    node = left[t, node]
                else:
                    node = right[t, node]
            acc += value[t, node]
        out[r] = acc / T
    return out


@njit(cache=True)
def _median_sorted(row, k):
    return 0.5 * (row[(k - 1) // 2] + row[k // 2])


@njit(cache=True)
def predict_relative(sorted_vals, counts, increments, feat, thr, left, right, value):
    """Batched prediction across per-count forests.

    Row ``r`` uses the forest for ``k = counts[r]`` (index ``k - 1``).  Its
    features are the first ``k`` entries of ``sorted_vals[r]`` minus their
    median, followed by ``increments[r]``; the result is that median plus the
    mean tree output.  Rows with ``k == 0`` yield NaN.
    """
    R = sorted_vals.shape[0]
    T = feat.shape[1]
    out = np.empty(R)
    for r in range(R):
        k = counts[r]
        if k <= 0:
            out[r] = np.nan
            continue
        anchor = _median_sorted(sorted_vals[r], k)
        fi = k - 1
        acc = 0.0
        for t in range(T):
            node = 0
            while feat[fi, t, node] >= 0:
                f = feat[fi, t, node]
                if f < k:
                    x = sorted_vals[r, f] - anchor
                else:
                    x = increments[r, f - k]
                if x <= thr[fi, t, node]:
                    node = left[fi, t, node]
                else:
                    node = right[fi, t, node]
            acc += value[fi, t, node]
        out[r] = anchor + acc / T
    return out
