"""Pure-numpy kernels, call-compatible with the numba loop kernels.

Tree growth reproduces the loop kernels bit for bit: running totals are
taken with ``np.cumsum`` (sequential, like the loops) rather than
``np.sum`` (pairwise), and sorts are stable in both backends.
"""
import warnings

import numpy as np

from . import _common
from ._common import KIND_IV, WEAK_COV_TOL, draw_features


def _total(a):
    return np.cumsum(a)[-1]


def _node_response(kind, r, w, y, d, z):
    wn = w[r]
    sw = _total(wn)
    ybar = _total(wn * y[r]) / sw
    if kind != KIND_IV:
        return y[r] - ybar, wn
    dbar = _total(wn * d[r]) / sw
    zbar = _total(wn * z[r]) / sw
    dz = z[r] - zbar
    czd = _total(wn * dz * (d[r] - dbar)) / sw
    czy = _total(wn * dz * (y[r] - ybar)) / sw
    if abs(czd) < WEAK_COV_TOL:
        return None, wn
    tau = czy / czd
    mu = ybar - tau * dbar
    return (z[r] - zbar) * (y[r] - mu - tau * d[r]) / czd, wn


def _best_split(X, r, feats, rho, wn, min_node_size):
    m = r.shape[0]
    wr = wn * rho
    W = _total(wn)
    S = _total(wr)
    SS = _total(wr * rho)
    if not SS > 0.0:
        return -1, 0.0
    base = S * S / W
    best_gain = -1.0
    best_f, best_thr = -1, 0.0
    nl = np.arange(1, m)
    size_ok = (nl >= min_node_size) & (m - nl >= min_node_size)
    if not size_ok.any():
        return -1, 0.0
    for f in feats:
        vals = X[r, f]
        # ties by row id, matching the presorted order of the loop kernel
        order = np.lexsort((r, vals))
        sv = vals[order]
        WL = np.cumsum(wn[order])[:-1]
        SL = np.cumsum(wr[order])[:-1]
        ok = size_ok & (sv[:-1] < sv[1:])
        if not ok.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = SL * SL / WL + (S - SL) * (S - SL) / (W - WL) - base
        gain = np.where(ok, gain, -np.inf)
        k = int(np.argmax(gain))
        if gain[k] > best_gain:
            best_gain = gain[k]
            best_f = int(f)
            a, b = sv[k], sv[k + 1]
            thr = 0.5 * (a + b)
            best_thr = a if thr >= b else thr
    if best_gain <= 1e-12 * SS:
        return -1, 0.0
    return best_f, float(best_thr)


def _route_rows(feature, threshold, left, right, X, rows):
    node = np.zeros(rows.shape[0], np.int64)
    active = feature[node] >= 0
    while active.any():
        idx = np.flatnonzero(active)
        nd = node[idx]
        go_left = X[rows[idx], feature[nd]] <= threshold[nd]
        node[idx] = np.where(go_left, left[nd], right[nd])
        active[idx] = feature[node[idx]] >= 0
    return node


def _min_child(m, min_node_size, alpha):
    c = int(np.ceil(alpha * m))
    return c if c > min_node_size else min_node_size


def grow_one(X, w, y, d, z, kind, presort, split_rows, est_rows, seed, mtry, min_node_size,
             alpha, feature, threshold, left, right, depth, est_leaf):
    max_nodes = feature.shape[0]
    p = X.shape[1]
    rows = split_rows.astype(np.int64).copy()
    perm = np.empty(p, np.int64)
    feature[:] = -1
    left[:] = -1
    right[:] = -1
    threshold[:] = 0.0
    depth[:] = -1
    state = int(seed)
    n_nodes = 1
    depth[0] = 0
    stack = [(0, rows.shape[0], 0)]
    while stack:
        s, e, node = stack.pop()
        mc = _min_child(e - s, min_node_size, alpha)
        if e - s < 2 * mc:
            continue
        r = rows[s:e]
        rho, wn = _node_response(kind, r, w, y, d, z)
        if rho is None:
            continue
        state = draw_features(state, p, mtry, perm)
        feats = perm[:mtry]
        f, thr = _best_split(X, r, feats, rho, wn, mc)
        if f < 0:
            continue
        go_left = X[r, f] <= thr
        nl = int(go_left.sum())
        rows[s:e] = np.concatenate([r[go_left], r[~go_left]])
        lc, rc = n_nodes, n_nodes + 1
        n_nodes += 2
        feature[node], threshold[node] = f, thr
        left[node], right[node] = lc, rc
        depth[lc] = depth[rc] = depth[node] + 1
        stack.append((s + nl, e, rc))
        stack.append((s, s + nl, lc))
    assert n_nodes <= max_nodes

    leaf = _route_rows(feature, threshold, left, right, X, est_rows)
    cnt = np.bincount(leaf, minlength=n_nodes)
    for v in range(n_nodes - 1, -1, -1):
        if feature[v] < 0:
            continue
        lc, rc = left[v], right[v]
        if feature[lc] < 0 and cnt[lc] == 0:
            c = rc
        elif feature[rc] < 0 and cnt[rc] == 0:
            c = lc
        else:
            continue
        feature[v], threshold[v] = feature[c], threshold[c]
        left[v], right[v] = left[c], right[c]
        cnt[v] = cnt[c]

    depth[:n_nodes] = -1
    depth[0] = 0
    todo = [0]
    while todo:
        v = todo.pop()
        if feature[v] >= 0:
            depth[left[v]] = depth[right[v]] = depth[v] + 1
            todo.extend((right[v], left[v]))
    est_leaf[:] = _route_rows(feature, threshold, left, right, X, est_rows)
    return n_nodes


def grow_trees(X, w, y, d, z, kind, presort, split_rows, split_off, est_rows, est_off, seeds,
               mtry, min_node_size, alpha, node_off, feature, threshold, left, right, depth,
               est_leaf, n_nodes):
    for t in range(seeds.shape[0]):
        a, b = node_off[t], node_off[t + 1]
        n_nodes[t] = grow_one(
            X, w, y, d, z, kind, presort,
            split_rows[split_off[t]:split_off[t + 1]],
            est_rows[est_off[t]:est_off[t + 1]],
            int(seeds[t]), mtry, min_node_size, alpha,
            feature[a:b], threshold[a:b], left[a:b], right[a:b], depth[a:b],
            est_leaf[est_off[t]:est_off[t + 1]],
        )


def _route_points(feature, threshold, left, right, off, X):
    n = X.shape[0]
    g = np.full(n, off, np.int64)
    active = feature[g] >= 0
    while active.any():
        idx = np.flatnonzero(active)
        gi = g[idx]
        go_left = X[idx, feature[gi]] <= threshold[gi]
        g[idx] = off + np.where(go_left, left[gi], right[gi])
        active[idx] = feature[g[idx]] >= 0
    return g


def _valid_mask(tree_bag, bag_member, oob_rows, t):
    valid = np.ones(oob_rows.shape[0], bool)
    has = oob_rows >= 0
    valid[has] = ~bag_member[tree_bag[t], oob_rows[has]]
    return valid


def predict_mean(feature, threshold, left, right, node_off, leaf_mean, tree_bag,
                 bag_member, X, oob_rows, out, n_valid):
    n_trees = node_off.shape[0] - 1
    acc = np.zeros((X.shape[0], leaf_mean.shape[1]))
    cnt = np.zeros(X.shape[0], np.int64)
    for t in range(n_trees):
        valid = _valid_mask(tree_bag, bag_member, oob_rows, t)
        g = _route_points(feature, threshold, left, right, node_off[t], X)
        acc[valid] += leaf_mean[g[valid]]
        cnt += valid
    n_valid[:] = cnt
    with np.errstate(invalid="ignore", divide="ignore"):
        out[:] = acc / cnt[:, None]


def predict_iv(feature, threshold, left, right, node_off, leaf_mean, tree_bag,
               bag_member, bag_size, X, oob_rows, out, tau, var, n_valid):
    n_test = X.shape[0]
    n_trees = node_off.shape[0] - 1
    n_bags = n_trees // bag_size
    routes = []
    acc = np.zeros((n_test, 6))
    cnt = np.zeros(n_test, np.int64)
    for t in range(n_trees):
        valid = _valid_mask(tree_bag, bag_member, oob_rows, t)
        g = _route_points(feature, threshold, left, right, node_off[t], X)
        routes.append(np.where(valid, g, -1))
        acc[valid] += leaf_mean[g[valid]]
        cnt += valid
    n_valid[:] = cnt
    with np.errstate(invalid="ignore", divide="ignore"):
        M = acc / cnt[:, None]
    out[:] = M
    ybar, dbar, zbar = M[:, 0], M[:, 1], M[:, 2]
    czd = M[:, 4] - zbar * dbar
    czy = M[:, 3] - zbar * ybar
    ok = (cnt > 0) & (np.abs(czd) >= WEAK_COV_TOL)
    tau[:] = np.nan
    var[:] = np.nan
    with np.errstate(invalid="ignore", divide="ignore"):
        t_hat = np.where(ok, czy / czd, np.nan)
    tau[:] = t_hat
    if bag_size < 2:
        return
    bag_means = np.full((n_bags, n_test), np.nan)
    within = np.zeros(n_test)
    for b in range(n_bags):
        psis = []
        for j in range(bag_size):
            g = routes[b * bag_size + j]
            lm = leaf_mean[np.maximum(g, 0)]
            val = (lm[:, 3] - zbar * lm[:, 0] - ybar * lm[:, 2] + zbar * ybar
                   - t_hat * (lm[:, 4] - zbar * lm[:, 1] - dbar * lm[:, 2] + zbar * dbar))
            psis.append(val / czd)
        psis = np.array(psis)
        good = routes[b * bag_size] >= 0
        mb = psis.mean(axis=0)
        within += np.where(good, ((psis - mb) ** 2).sum(axis=0), 0.0)
        bag_means[b] = np.where(good, mb, np.nan)
    n_good = np.sum(~np.isnan(bag_means), axis=0)
    enough = ok & (n_good >= 2)
    with np.errstate(invalid="ignore", divide="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        between = np.nanvar(bag_means, axis=0, ddof=1) if n_bags >= 2 else np.full(n_test, np.nan)
        v = between - within / (n_good * (bag_size - 1)) / bag_size
    var[:] = np.where(enough, v, np.nan)


def policy_root_scan(R, U, r, order, max_cells=4_000_000):
    """Same contract as the loop kernel, via cumulative 2-D rank histograms."""
    n, p = R.shape
    best_val, best_j, best_a = -np.inf, -1, -1
    for j in range(p):
        Uj = int(U[j])
        if Uj < 2:
            continue
        tot_j = np.bincount(R[:, j], weights=r, minlength=Uj)
        T_left = np.cumsum(tot_j)[:-1]
        T_right = tot_j.sum() - T_left
        left_val = np.maximum(T_left, 0.0)
        right_val = np.maximum(T_right, 0.0)
        for k in range(p):
            Uk = int(U[k])
            col_all = np.cumsum(np.bincount(R[:, k], weights=r, minlength=Uk))
            chunk = max(1, max_cells // max(Uk, 1))
            carry = np.zeros(Uk)
            for a0 in range(0, Uj - 1, chunk):
                a1 = min(a0 + chunk, Uj - 1)
                sel = (R[:, j] >= a0) & (R[:, j] < a1)
                H = np.zeros((a1 - a0) * Uk)
                np.add.at(H, (R[sel, j] - a0) * Uk + R[sel, k], r[sel])
                H = H.reshape(a1 - a0, Uk)
                C = np.cumsum(H, axis=0) + carry
                carry = C[-1].copy()
                P_left = np.cumsum(C, axis=1)
                P_right = col_all - P_left
                TL = T_left[a0:a1]
                TR = T_right[a0:a1]
                left_val[a0:a1] = np.maximum.reduce([
                    left_val[a0:a1], P_left.max(axis=1), TL - P_left.min(axis=1)])
                right_val[a0:a1] = np.maximum.reduce([
                    right_val[a0:a1], P_right.max(axis=1), TR - P_right.min(axis=1)])
        tot = left_val + right_val
        a = int(np.argmax(tot))
        if tot[a] > best_val:
            best_val, best_j, best_a = float(tot[a]), j, a
    return best_j, best_a, best_val


__all__ = [
    "grow_one", "grow_trees", "predict_mean", "predict_iv", "policy_root_scan",
    "KIND_IV", "WEAK_COV_TOL", "_common",
]
