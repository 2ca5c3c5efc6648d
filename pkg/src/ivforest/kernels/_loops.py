"""Loop kernels compiled with numba.

Array layout: trees are stored back to back in flat node arrays; a tree's
nodes live in ``[node_off[t], node_off[t + 1])`` and child pointers are
local to the tree. A node is a leaf when ``feature < 0``.
"""
import numpy as np
from numba import njit, prange

from . import _common

KIND_IV = _common.KIND_IV
WEAK_COV_TOL = _common.WEAK_COV_TOL

minstd_next = njit(cache=True)(_common.minstd_next)
draw_features = njit(cache=True)(_common.draw_features)


@njit(cache=True)
def _node_response(kind, rows, s, e, w, y, d, z, rho, tot):
    """Split response per row id, written into ``rho``. False on a weak node.

    ``tot`` receives the weighted totals (W, S, SS) of the response.
    """
    sw = 0.0
    sy = 0.0
    sd = 0.0
    sz = 0.0
    for k in range(s, e):
        i = rows[k]
        wi = w[i]
        sw += wi
        sy += wi * y[i]
        sd += wi * d[i]
        sz += wi * z[i]
    ybar = sy / sw
    S = 0.0
    SS = 0.0
    if kind != KIND_IV:
        for k in range(s, e):
            i = rows[k]
            r = y[i] - ybar
            rho[i] = r
            S += w[i] * r
            SS += w[i] * r * r
    else:
        dbar = sd / sw
        zbar = sz / sw
        czd = 0.0
        czy = 0.0
        for k in range(s, e):
            i = rows[k]
            dz = z[i] - zbar
            czd += w[i] * dz * (d[i] - dbar)
            czy += w[i] * dz * (y[i] - ybar)
        czd = czd / sw
        czy = czy / sw
        if abs(czd) < WEAK_COV_TOL:
            return False
        tau = czy / czd
        mu = ybar - tau * dbar
        for k in range(s, e):
            i = rows[k]
            r = (z[i] - zbar) * (y[i] - mu - tau * d[i]) / czd
            rho[i] = r
            S += w[i] * r
            SS += w[i] * r * r
    tot[0] = sw
    tot[1] = S
    tot[2] = SS
    return True


@njit(cache=True)
def _best_split(Xt, srt, s, e, feats, rho, w, unit_w, W, S, SS, min_node_size,
                cw, cs, xs, gain):
    # Xt is feature-major; srt[f, s:e] holds the node's rows sorted by
    # feature f, ties by row id. cw, cs, xs, gain are scratch buffers.
    # With unit weights the running weight is the exact count k + 1.
    m = e - s
    if not SS > 0.0:
        return -1, 0.0
    base = S * S / W
    lo = min_node_size - 1
    hi = m - min_node_size - 1
    if hi < lo:
        return -1, 0.0
    best_gain = -1.0
    best_f = -1
    best_thr = 0.0
    for fi in range(feats.shape[0]):
        f = feats[fi]
        SL = 0.0
        if unit_w:
            for k in range(hi + 1):
                o = srt[f, s + k]
                SL += rho[o]
                cs[k] = SL
                xs[k] = Xt[f, o]
                cw[k] = k + 1.0
        else:
            WL = 0.0
            for k in range(hi + 1):
                o = srt[f, s + k]
                WL += w[o]
                SL += w[o] * rho[o]
                cw[k] = WL
                cs[k] = SL
                xs[k] = Xt[f, o]
        xs[hi + 1] = Xt[f, srt[f, s + hi + 1]]
        # branch-free so the divisions vectorise; tied x cannot be cut
        for k in range(lo, hi + 1):
            g = cs[k] * cs[k] / cw[k] + (S - cs[k]) * (S - cs[k]) / (W - cw[k]) - base
            gain[k] = g if xs[k] < xs[k + 1] else -np.inf
        kb = -1
        gb = best_gain
        for k in range(lo, hi + 1):
            if gain[k] > gb:
                gb = gain[k]
                kb = k
        if kb >= 0:
            best_gain = gb
            best_f = f
            a = xs[kb]
            b = xs[kb + 1]
            thr = 0.5 * (a + b)
            if thr >= b:
                thr = a
            best_thr = thr
    if best_gain <= 1e-12 * SS:
        return -1, 0.0
    return best_f, best_thr


@njit(cache=True)
def _route_row(feature, threshold, left, right, X, i):
    node = 0
    while feature[node] >= 0:
        node = left[node] + (X[i, feature[node]] > threshold[node])
    return node


@njit(cache=True)
def _min_child(m, min_node_size, alpha):
    c = int(np.ceil(alpha * m))
    return c if c > min_node_size else min_node_size


@njit(cache=True)
def grow_one(X, w, y, d, z, kind, presort, split_rows, est_rows, seed, mtry, min_node_size,
             alpha, feature, threshold, left, right, depth, est_leaf):
    """Grow, honestly populate and prune one tree. Returns the node count.

    ``presort[f]`` is a stable argsort of ``X[:, f]`` over all rows. The
    split sample is copied into local feature-major arrays and each node
    keeps its rows in presorted order per feature, so nothing is sorted
    below the root. Row orders are double buffered: a node's children are
    written to the other buffer. ``split_rows`` must be ascending.
    """
    max_nodes = feature.shape[0]
    n_all, p = X.shape
    n = split_rows.shape[0]
    pos = np.full(n_all, -1, np.int64)
    Xl = np.empty((p, n))
    wl = np.empty(n)
    yl = np.empty(n)
    dl = np.empty(n)
    zl = np.empty(n)
    for k in range(n):
        i = split_rows[k]
        pos[i] = k
        wl[k] = w[i]
        yl[k] = y[i]
        dl[k] = d[i]
        zl[k] = z[i]
        for f in range(p):
            Xl[f, k] = X[i, f]
    # slot 0 of srt is the row list, slots 1..p the per-feature orders
    srt = np.empty((2, p + 1, n), np.int64)
    for k in range(n):
        srt[0, 0, k] = k
    for f in range(p):
        c = 0
        for k in range(n_all):
            j = pos[presort[f, k]]
            if j >= 0:
                srt[0, f + 1, c] = j
                c += 1
    rho = np.empty(n)
    tot = np.empty(3)
    unit_w = True
    for k in range(n):
        if wl[k] != 1.0:
            unit_w = False
    cw = np.empty(n)
    cs = np.empty(n)
    xs = np.empty(n)
    gain = np.empty(n)
    go = np.zeros(n, np.int64)
    perm = np.empty(p, np.int64)
    st_s = np.empty(max_nodes, np.int64)
    st_e = np.empty(max_nodes, np.int64)
    st_node = np.empty(max_nodes, np.int64)
    st_par = np.empty(max_nodes, np.int64)
    for v in range(max_nodes):
        feature[v] = -1
        left[v] = -1
        right[v] = -1
        threshold[v] = 0.0
        depth[v] = -1
    state = seed
    n_nodes = 1
    depth[0] = 0
    st_s[0] = 0
    st_e[0] = n
    st_node[0] = 0
    st_par[0] = 0
    top = 1
    while top > 0:
        top -= 1
        s = st_s[top]
        e = st_e[top]
        node = st_node[top]
        par = st_par[top]
        m = e - s
        mc = _min_child(m, min_node_size, alpha)
        if m < 2 * mc:
            continue
        rows = srt[par, 0]
        if not _node_response(kind, rows, s, e, wl, yl, dl, zl, rho, tot):
            continue
        state = draw_features(state, p, mtry, perm)
        feats = perm[:mtry]
        f, thr = _best_split(Xl, srt[par, 1:], s, e, feats, rho, wl, unit_w, tot[0], tot[1],
                             tot[2], mc, cw, cs, xs, gain)
        if f < 0:
            continue
        nl = 0
        for k in range(s, e):
            i = rows[k]
            gi = 1 if Xl[f, i] <= thr else 0
            go[i] = gi
            nl += gi
        # stable branch-free partition into the other buffer
        q = 1 - par
        for g in range(p + 1):
            src = srt[par, g]
            dst = srt[q, g]
            a = s
            b = s + nl
            for k in range(s, e):
                i = src[k]
                gi = go[i]
                dst[gi * a + (1 - gi) * b] = i
                a += gi
                b += 1 - gi
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[node] = f
        threshold[node] = thr
        left[node] = lc
        right[node] = rc
        depth[lc] = depth[node] + 1
        depth[rc] = depth[node] + 1
        st_s[top] = s + nl
        st_e[top] = e
        st_node[top] = rc
        st_par[top] = q
        top += 1
        st_s[top] = s
        st_e[top] = s + nl
        st_node[top] = lc
        st_par[top] = q
        top += 1

    # honest population, then collapse empty leaves into their sibling
    n_est = est_rows.shape[0]
    cnt = np.zeros(n_nodes, np.int64)
    for k in range(n_est):
        est_leaf[k] = _route_row(feature, threshold, left, right, X, est_rows[k])
        cnt[est_leaf[k]] += 1
    moved = np.full(n_nodes, -1, np.int64)
    for v in range(n_nodes - 1, -1, -1):
        if feature[v] < 0:
            continue
        lc = left[v]
        rc = right[v]
        if feature[lc] < 0 and cnt[lc] == 0:
            c = rc
        elif feature[rc] < 0 and cnt[rc] == 0:
            c = lc
        else:
            continue
        feature[v] = feature[c]
        threshold[v] = threshold[c]
        left[v] = left[c]
        right[v] = right[c]
        cnt[v] = cnt[c]
        if feature[c] < 0:
            moved[c] = v
    # a leaf copied into its parent takes its rows along (parents have lower ids)
    for k in range(n_est):
        g = est_leaf[k]
        while moved[g] >= 0:
            g = moved[g]
        est_leaf[k] = g

    for v in range(n_nodes):
        depth[v] = -1
    depth[0] = 0
    st_node[0] = 0
    top = 1
    while top > 0:
        top -= 1
        v = st_node[top]
        if feature[v] >= 0:
            depth[left[v]] = depth[v] + 1
            depth[right[v]] = depth[v] + 1
            st_node[top] = right[v]
            st_node[top + 1] = left[v]
            top += 2
    return n_nodes


@njit(parallel=True, cache=True)
def grow_trees(X, w, y, d, z, kind, presort, split_rows, split_off, est_rows, est_off, seeds,
               mtry, min_node_size, alpha, node_off, feature, threshold, left, right, depth,
               est_leaf, n_nodes):
    n_trees = seeds.shape[0]
    for t in prange(n_trees):
        a = node_off[t]
        b = node_off[t + 1]
        n_nodes[t] = grow_one(
            X, w, y, d, z, kind, presort,
            split_rows[split_off[t]:split_off[t + 1]],
            est_rows[est_off[t]:est_off[t + 1]],
            seeds[t], mtry, min_node_size, alpha,
            feature[a:b], threshold[a:b], left[a:b], right[a:b], depth[a:b],
            est_leaf[est_off[t]:est_off[t + 1]],
        )


@njit(cache=True)
def _route_point(feature, threshold, left, off, X, i):
    # siblings are allocated in pairs, so the right child is left + 1 and
    # the descent needs no data-dependent branch
    node = 0
    while True:
        g = off + node
        f = feature[g]
        if f < 0:
            return g
        node = left[g] + (X[i, f] > threshold[g])


BLOCK = 256


@njit(cache=True)
def _route_block(feature, threshold, left, node_off, tree_bag, bag_member, X,
                 oob_rows, i0, i1, leaves):
    # tree-major over a block of points keeps one tree's nodes in cache;
    # leaves[t, i - i0] is -1 where tree t saw row i
    n_trees = node_off.shape[0] - 1
    for t in range(n_trees):
        off = node_off[t]
        bag = tree_bag[t]
        for i in range(i0, i1):
            r = oob_rows[i]
            if r >= 0 and bag_member[bag, r]:
                leaves[t, i - i0] = -1
            else:
                leaves[t, i - i0] = _route_point(feature, threshold, left, off, X, i)


@njit(parallel=True, cache=True)
def predict_mean(feature, threshold, left, right, node_off, leaf_mean, tree_bag,
                 bag_member, X, oob_rows, out, n_valid):
    n_test = X.shape[0]
    n_trees = node_off.shape[0] - 1
    S = leaf_mean.shape[1]
    n_blocks = (n_test + BLOCK - 1) // BLOCK
    for blk in prange(n_blocks):
        i0 = blk * BLOCK
        i1 = min(n_test, i0 + BLOCK)
        m = i1 - i0
        leaves = np.empty((n_trees, m), np.int64)
        _route_block(feature, threshold, left, node_off, tree_bag, bag_member, X,
                     oob_rows, i0, i1, leaves)
        acc = np.zeros((m, S))
        cnt = np.zeros(m, np.int64)
        for t in range(n_trees):
            for ii in range(m):
                g = leaves[t, ii]
                if g >= 0:
                    for c in range(S):
                        acc[ii, c] += leaf_mean[g, c]
                    cnt[ii] += 1
        for ii in range(m):
            n_valid[i0 + ii] = cnt[ii]
            for c in range(S):
                out[i0 + ii, c] = acc[ii, c] / cnt[ii] if cnt[ii] > 0 else np.nan


@njit(parallel=True, cache=True)
def predict_iv(feature, threshold, left, right, node_off, leaf_mean, tree_bag,
               bag_member, bag_size, X, oob_rows, out, tau, var, n_valid):
    """Forest-averaged leaf moments, tau and little-bags variance per point.

    leaf_mean columns: Y, D, Z, ZY, ZD, ZZ. ``var`` is the raw debiased
    estimate (may be negative); NaN where it is not defined.
    """
    n_test = X.shape[0]
    n_trees = node_off.shape[0] - 1
    n_bags = n_trees // bag_size
    n_blocks = (n_test + BLOCK - 1) // BLOCK
    for blk in prange(n_blocks):
        i0 = blk * BLOCK
        i1 = min(n_test, i0 + BLOCK)
        m = i1 - i0
        leaves = np.empty((n_trees, m), np.int64)
        _route_block(feature, threshold, left, node_off, tree_bag, bag_member, X,
                     oob_rows, i0, i1, leaves)
        acc = np.zeros((m, 6))
        cnt = np.zeros(m, np.int64)
        for t in range(n_trees):
            for ii in range(m):
                g = leaves[t, ii]
                if g >= 0:
                    for c in range(6):
                        acc[ii, c] += leaf_mean[g, c]
                    cnt[ii] += 1
        czd = np.empty(m)
        ok = np.zeros(m, np.bool_)
        for ii in range(m):
            i = i0 + ii
            n_valid[i] = cnt[ii]
            tau[i] = np.nan
            var[i] = np.nan
            if cnt[ii] == 0:
                for c in range(6):
                    out[i, c] = np.nan
                continue
            for c in range(6):
                out[i, c] = acc[ii, c] / cnt[ii]
            czd[ii] = out[i, 4] - out[i, 2] * out[i, 1]
            if abs(czd[ii]) < WEAK_COV_TOL:
                continue
            tau[i] = (out[i, 3] - out[i, 2] * out[i, 0]) / czd[ii]
            ok[ii] = True
        if bag_size < 2:
            continue
        # little bags: per-bag means of the scaled moment, bag-major
        bag_mean = np.empty((max(n_bags, 1), m))
        n_good = np.zeros(m, np.int64)
        within = np.zeros(m)
        psi = np.empty(bag_size)
        for b in range(n_bags):
            t0 = b * bag_size
            for ii in range(m):
                if not ok[ii] or leaves[t0, ii] < 0:
                    continue
                i = i0 + ii
                ybar = out[i, 0]
                dbar = out[i, 1]
                zbar = out[i, 2]
                tau_i = tau[i]
                sb = 0.0
                for j in range(bag_size):
                    g = leaves[t0 + j, ii]
                    m_y = leaf_mean[g, 0]
                    m_d = leaf_mean[g, 1]
                    m_z = leaf_mean[g, 2]
                    val = (leaf_mean[g, 3] - zbar * m_y - ybar * m_z + zbar * ybar
                           - tau_i * (leaf_mean[g, 4] - zbar * m_d - dbar * m_z + zbar * dbar))
                    psi[j] = val / czd[ii]
                    sb += psi[j]
                mb = sb / bag_size
                for j in range(bag_size):
                    within[ii] += (psi[j] - mb) ** 2
                bag_mean[n_good[ii], ii] = mb
                n_good[ii] += 1
        for ii in range(m):
            k = n_good[ii]
            if k < 2:
                continue
            mean_all = 0.0
            for b in range(k):
                mean_all += bag_mean[b, ii]
            mean_all /= k
            between = 0.0
            for b in range(k):
                between += (bag_mean[b, ii] - mean_all) ** 2
            between /= k - 1
            var[i0 + ii] = between - within[ii] / (k * (bag_size - 1)) / bag_size


@njit(cache=True)
def _seg_set(seg_sum, seg_max, seg_min, base, size, pos, delta):
    v = size + pos
    seg_sum[base + v] += delta
    seg_max[base + v] = seg_sum[base + v]
    seg_min[base + v] = seg_sum[base + v]
    v //= 2
    while v >= 1:
        lc = base + 2 * v
        rc = lc + 1
        seg_sum[base + v] = seg_sum[lc] + seg_sum[rc]
        seg_max[base + v] = max(seg_max[lc], seg_sum[lc] + seg_max[rc])
        seg_min[base + v] = min(seg_min[lc], seg_sum[lc] + seg_min[rc])
        v //= 2


@njit(cache=True)
def _side_value(seg_max, seg_min, seg_base, T, p):
    # best depth-1 value of a set: max(T, 0, max prefix, T - min prefix)
    v = max(T, 0.0)
    for k in range(p):
        v = max(v, seg_max[seg_base[k] + 1], T - seg_min[seg_base[k] + 1])
    return v


@njit(cache=True)
def policy_root_scan(R, U, r, order):
    """Exact depth-2 scan. Returns (root feature, root rank cut, value).

    R holds dense per-feature ranks; a root cut at rank ``a`` sends ranks
    <= a left. Each child's best depth-1 rule is tracked with a prefix-sum
    segment tree per candidate child feature, so every root cut costs
    O(p log n) amortised.
    """
    n, p = R.shape
    seg_size = np.empty(p, np.int64)
    seg_base = np.empty(p, np.int64)
    total = 0
    for k in range(p):
        sz = 1
        while sz < U[k]:
            sz *= 2
        seg_size[k] = sz
        seg_base[k] = total
        total += 2 * sz
    seg_sum = np.zeros(total)
    seg_max = np.zeros(total)
    seg_min = np.zeros(total)
    max_u = 1
    for k in range(p):
        if U[k] > max_u:
            max_u = U[k]
    left_val = np.empty(max_u)
    best_val = -np.inf
    best_j = -1
    best_a = -1
    for j in range(p):
        if U[j] < 2:
            continue
        seg_sum[:] = 0.0
        seg_max[:] = 0.0
        seg_min[:] = 0.0
        pos = 0
        T = 0.0
        for a in range(U[j] - 1):
            while pos < n and R[order[j, pos], j] == a:
                i = order[j, pos]
                T += r[i]
                for k in range(p):
                    _seg_set(seg_sum, seg_max, seg_min, seg_base[k], seg_size[k], R[i, k], r[i])
                pos += 1
            left_val[a] = _side_value(seg_max, seg_min, seg_base, T, p)
        seg_sum[:] = 0.0
        seg_max[:] = 0.0
        seg_min[:] = 0.0
        pos = n - 1
        T = 0.0
        right_val = np.empty(U[j] - 1)
        for a in range(U[j] - 2, -1, -1):
            while pos >= 0 and R[order[j, pos], j] > a:
                i = order[j, pos]
                T += r[i]
                for k in range(p):
                    _seg_set(seg_sum, seg_max, seg_min, seg_base[k], seg_size[k], R[i, k], r[i])
                pos -= 1
            right_val[a] = _side_value(seg_max, seg_min, seg_base, T, p)
        for a in range(U[j] - 1):
            val = left_val[a] + right_val[a]
            if val > best_val:
                best_val = val
                best_j = j
                best_a = a
    return best_j, best_a, best_val
