"""Honest, cluster-subsampled tree ensembles (regression and IV kinds).

Trees are stored flat: tree ``t`` owns nodes ``[node_off[t], node_off[t+1])``
and child pointers are local to the tree. Trees are grouped into bags of
``bag_size`` consecutive trees; every tree in a bag draws from one shared
half-sample of clusters, which is what the variance estimator needs.
"""
from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DataError, ValidationError

FORMAT_VERSION = 1
IV_COLUMNS = ("y", "d", "z", "zy", "zd", "zz")


def save_arrays(path, arrays: dict) -> None:
    """Write an ``.npz`` archive with fixed entry timestamps, so equal
    arrays always give identical bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def default_mtry(p: int) -> int:
    return min(math.ceil(math.sqrt(p)) + 20, p)


@dataclass(frozen=True)
class TreeParams:
    n_trees: int = 2000
    subsample_fraction: float = 0.5
    honesty_fraction: float = 0.5
    mtry: int | None = None
    min_node_size: int = 5
    alpha: float = 0.05
    seed: int = 0
    cluster_sampling: bool = True
    bag_size: int = 4

    def __post_init__(self):
        if int(self.n_trees) < 1:
            raise ValidationError("n_trees must be positive")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise ValidationError("subsample_fraction must lie in (0, 1]")
        if not 0.0 < self.honesty_fraction < 1.0:
            raise ValidationError("honesty_fraction must lie in (0, 1)")
        if int(self.min_node_size) < 1:
            raise ValidationError("min_node_size must be positive")
        if not 0.0 <= self.alpha < 0.5:
            raise ValidationError("alpha must lie in [0, 0.5)")
        if self.mtry is not None and int(self.mtry) < 1:
            raise ValidationError("mtry must be positive")
        if int(self.bag_size) < 1:
            raise ValidationError("bag_size must be positive")
        # round the tree count up so bags are complete
        b = int(self.bag_size)
        object.__setattr__(self, "n_trees", -(-int(self.n_trees) // b) * b)

    def resolve_mtry(self, p: int) -> int:
        if self.mtry is None:
            return default_mtry(p)
        if self.mtry > p:
            raise ValidationError(f"mtry={self.mtry} exceeds the number of features p={p}")
        return int(self.mtry)

    def replace(self, **kw) -> "TreeParams":
        d = asdict(self)
        d.update(kw)
        return TreeParams(**d)


@dataclass(frozen=True)
class HonestTree:
    """Read-only view of one tree inside a forest."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    depth: np.ndarray
    split_rows: np.ndarray
    est_rows: np.ndarray
    est_leaf: np.ndarray

    @property
    def reachable(self) -> np.ndarray:
        return self.depth >= 0

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.reachable & (self.feature < 0))

    def leaf_rows(self) -> dict[int, np.ndarray]:
        order = np.argsort(self.est_leaf, kind="stable")
        keys, starts = np.unique(self.est_leaf[order], return_index=True)
        parts = np.split(self.est_rows[order], starts[1:])
        return {int(k): v for k, v in zip(keys, parts)}

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, float)
        return kernels.numpy_backend._route_rows(
            self.feature, self.threshold, self.left, self.right, X, np.arange(X.shape[0]))


def _cluster_index(cluster_id):
    _, codes = np.unique(np.asarray(cluster_id), return_inverse=True)
    return codes.astype(np.int64), int(codes.max()) + 1 if codes.size else 0


def draw_subsamples(cluster_id, params: TreeParams):
    """Per-tree split/estimation rows and per-bag membership masks.

    Returns (split_rows, split_off, est_rows, est_off, bag_member, seeds),
    where ``seeds`` are the per-tree states for the feature sampler.
    """
    codes, G = _cluster_index(cluster_id)
    n = codes.shape[0]
    ell = params.bag_size
    n_bags = params.n_trees // ell
    bag_member = np.zeros((n_bags, n), bool)
    split_parts, est_parts = [], []
    seeds = np.empty(params.n_trees, np.int64)
    for b in range(n_bags):
        brng = np.random.default_rng(np.random.SeedSequence([params.seed, 0, b]))
        if ell == 1:
            pool = np.arange(G)
            frac = params.subsample_fraction
        else:
            pool = brng.permutation(G)[: max(1, G // 2)]
            frac = min(1.0, 2.0 * params.subsample_fraction)
        in_bag = np.zeros(G, bool)
        for j in range(ell):
            t = b * ell + j
            rng = np.random.default_rng(np.random.SeedSequence([params.seed, 1, t]))
            k = max(2, int(round(frac * pool.shape[0])))
            chosen = rng.permutation(pool)[: min(k, pool.shape[0])]
            seeds[t] = kernels.seed_state(int(rng.integers(1, 2**31 - 1)))
            n_split = min(max(1, int(math.floor(params.honesty_fraction * chosen.shape[0]))),
                          chosen.shape[0] - 1)
            cm = np.zeros(G, bool)
            cm[chosen[:n_split]] = True
            split_parts.append(np.flatnonzero(cm[codes]))
            cm[:] = False
            cm[chosen[n_split:]] = True
            est_parts.append(np.flatnonzero(cm[codes]))
            in_bag[chosen] = True
        bag_member[b] = in_bag[codes]
    split_off = np.concatenate([[0], np.cumsum([len(s) for s in split_parts])]).astype(np.int64)
    est_off = np.concatenate([[0], np.cumsum([len(s) for s in est_parts])]).astype(np.int64)
    return (np.concatenate(split_parts).astype(np.int64), split_off,
            np.concatenate(est_parts).astype(np.int64), est_off, bag_member, seeds)


@dataclass(eq=False)
class ForestModel:
    """A grown ensemble. Treat as immutable once returned by ``grow_forest``."""

    params: TreeParams
    kind: int
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    depth: np.ndarray
    node_off: np.ndarray
    leaf_mean: np.ndarray
    leaf_weight: np.ndarray
    tree_bag: np.ndarray
    bag_member: np.ndarray
    split_rows: np.ndarray
    split_off: np.ndarray
    est_rows: np.ndarray
    est_off: np.ndarray
    est_leaf: np.ndarray
    weights: np.ndarray
    covariate_names: tuple[str, ...]
    fingerprint: str = ""
    outputs: tuple[str, ...] = ("y",)
    split_tally: np.ndarray = field(default=None)
    flags: dict = field(default_factory=dict)

    @property
    def n_trees(self) -> int:
        return int(self.node_off.shape[0] - 1)

    @property
    def n_train(self) -> int:
        return int(self.bag_member.shape[1])

    @property
    def p(self) -> int:
        return len(self.covariate_names)

    @property
    def bag_size(self) -> int:
        return int(self.params.bag_size)

    def tree(self, t: int) -> HonestTree:
        a, b = self.node_off[t], self.node_off[t + 1]
        ea, eb = self.est_off[t], self.est_off[t + 1]
        return HonestTree(
            self.feature[a:b], self.threshold[a:b], self.left[a:b], self.right[a:b],
            self.depth[a:b], self.split_rows[self.split_off[t]:self.split_off[t + 1]],
            self.est_rows[ea:eb], self.est_leaf[ea:eb],
        )

    def check_X(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.p:
            raise ValidationError(f"expected {self.p} covariates, got {X.shape[1]}")
        return X

    def _oob_rows(self, n, oob):
        if oob:
            if n != self.n_train:
                raise ValidationError("out-of-bag prediction needs the training rows")
            return np.arange(n, dtype=np.int64)
        return np.full(n, -1, np.int64)

    def predict_moments(self, X, oob=False, backend=None):
        """Forest-averaged leaf means per point, plus the number of trees used."""
        X = self.check_X(X)
        k = kernels.get_backend(backend)
        out = np.empty((X.shape[0], self.leaf_mean.shape[1]))
        n_valid = np.empty(X.shape[0], np.int64)
        k.predict_mean(self.feature, self.threshold, self.left, self.right, self.node_off,
                       self.leaf_mean, self.tree_bag, self.bag_member, X,
                       self._oob_rows(X.shape[0], oob), out, n_valid)
        return out, n_valid

    def predict(self, X, oob=False, backend=None) -> np.ndarray:
        """Prediction of the first output; rows lacking OOB trees use all trees."""
        out, n_valid = self.predict_moments(X, oob=oob, backend=backend)
        pred = out[:, 0].copy()
        miss = n_valid == 0
        if miss.any():
            full, _ = self.predict_moments(self.check_X(X)[miss], backend=backend)
            pred[miss] = full[:, 0]
        return pred

    def predict_iv_raw(self, X, oob=False, variance=True, backend=None):
        """IV moments, tau and the unfloored little-bags variance per point.

        Returns (moments (n, 6), tau, var, n_valid); tau is NaN where the
        local instrument-treatment covariance is below tolerance.
        """
        if self.kind != kernels.KIND_IV:
            raise ValidationError("not an IV forest")
        X = self.check_X(X)
        k = kernels.get_backend(backend)
        n = X.shape[0]
        out = np.empty((n, 6))
        tau = np.empty(n)
        var = np.empty(n)
        n_valid = np.empty(n, np.int64)
        k.predict_iv(self.feature, self.threshold, self.left, self.right, self.node_off,
                     self.leaf_mean, self.tree_bag, self.bag_member,
                     self.bag_size if variance else 1, X, self._oob_rows(n, oob), out, tau,
                     var, n_valid)
        return out, tau, var, n_valid

    def leaf_of(self, x) -> np.ndarray:
        """Global leaf id of a single point in every tree."""
        x = self.check_X(x)[0]
        g = self.node_off[:-1].copy()
        active = self.feature[g] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            gi = g[idx]
            go_left = x[self.feature[gi]] <= self.threshold[gi]
            tree_off = self.node_off[idx]
            g[idx] = tree_off + np.where(go_left, self.left[gi], self.right[gi])
            active[idx] = self.feature[g[idx]] >= 0
        return g

    _ARRAYS = ("feature", "threshold", "left", "right", "depth", "node_off", "leaf_mean",
               "leaf_weight", "tree_bag", "bag_member", "split_rows", "split_off", "est_rows",
               "est_off", "est_leaf", "weights", "split_tally")

    def to_arrays(self, prefix: str = "") -> dict:
        meta = {"format_version": FORMAT_VERSION, "params": asdict(self.params), "kind": self.kind,
                "covariate_names": list(self.covariate_names), "fingerprint": self.fingerprint,
                "outputs": list(self.outputs), "flags": self.flags}
        out = {prefix + k: getattr(self, k) for k in self._ARRAYS}
        out[prefix + "meta"] = np.array(json.dumps(meta))
        return out

    @classmethod
    def from_arrays(cls, f, prefix: str = "") -> "ForestModel":
        meta = json.loads(str(f[prefix + "meta"]))
        if meta.get("format_version") != FORMAT_VERSION:
            raise DataError(f"unsupported model format {meta.get('format_version')}")
        arrays = {k: np.asarray(f[prefix + k]) for k in cls._ARRAYS}
        return cls(params=TreeParams(**meta["params"]), kind=meta["kind"],
                   covariate_names=tuple(meta["covariate_names"]),
                   fingerprint=meta["fingerprint"], outputs=tuple(meta["outputs"]),
                   flags=meta["flags"], **arrays)

    def save(self, path) -> None:
        save_arrays(path, self.to_arrays())

    @classmethod
    def load(cls, path) -> "ForestModel":
        with np.load(Path(path), allow_pickle=False) as f:
            return cls.from_arrays(f)


def grow_forest(X, y, params: TreeParams, *, d=None, z=None, kind=kernels.KIND_REGRESSION,
                weights=None, cluster_id=None, covariate_names=None, fingerprint="",
                backend=None) -> ForestModel:
    """Grow an honest forest on arrays. ``kind`` selects the split response."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    n, p = X.shape
    y = np.ascontiguousarray(y, dtype=np.float64)
    if y.shape != (n,):
        raise ValidationError("y must be a vector with one entry per row")
    if p == 0:
        raise ValidationError("at least one covariate is required")
    if not np.isfinite(X).all() or not np.isfinite(y).all():
        raise DataError("non-finite values in forest inputs")
    if n < 2:
        raise ValidationError(f"need at least 2 rows, got {n}")
    mtry = params.resolve_mtry(p)
    w = np.ones(n) if weights is None else np.ascontiguousarray(weights, dtype=np.float64)
    iv = kind == kernels.KIND_IV
    if iv:
        if d is None or z is None:
            raise ValidationError("IV forests need treatment and instrument")
        d = np.ascontiguousarray(d, dtype=np.float64)
        z = np.ascontiguousarray(z, dtype=np.float64)
    else:
        d = z = y
    cluster_id = np.arange(n) if (cluster_id is None or not params.cluster_sampling) else cluster_id

    split_rows, split_off, est_rows, est_off, bag_member, seeds = draw_subsamples(cluster_id, params)
    T = params.n_trees
    n_split = np.diff(split_off)
    cap = 2 * (n_split // params.min_node_size) + 1
    node_off = np.concatenate([[0], np.cumsum(cap)]).astype(np.int64)
    M = int(node_off[-1])
    feature = np.empty(M, np.int64)
    threshold = np.empty(M)
    left = np.empty(M, np.int64)
    right = np.empty(M, np.int64)
    depth = np.empty(M, np.int64)
    est_leaf = np.empty(est_rows.shape[0], np.int64)
    n_nodes = np.empty(T, np.int64)
    presort = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T).astype(np.int64)
    k = kernels.get_backend(backend)
    k.grow_trees(X, w, y, d, z, int(kind), presort, split_rows, split_off, est_rows, est_off, seeds,
                 mtry, int(params.min_node_size), float(params.alpha), node_off, feature, threshold, left, right,
                 depth, est_leaf, n_nodes)

    # compact the per-tree node blocks
    new_off = np.concatenate([[0], np.cumsum(n_nodes)]).astype(np.int64)
    keep = np.arange(new_off[-1]) + np.repeat(node_off[:-1] - new_off[:-1], n_nodes)
    feature, threshold, left, right, depth = (a[keep] for a in (feature, threshold, left, right, depth))

    tree_of_est = np.repeat(np.arange(T), np.diff(est_off))
    g = new_off[tree_of_est] + est_leaf
    we = w[est_rows]
    sw = np.bincount(g, weights=we, minlength=new_off[-1])
    cols = [y, d, z, z * y, z * d, z * z] if iv else [y]
    with np.errstate(invalid="ignore", divide="ignore"):
        leaf_mean = np.column_stack([np.bincount(g, weights=we * c[est_rows], minlength=new_off[-1]) / sw
                                     for c in cols])
    leaf_mean[sw == 0] = 0.0

    internal = (feature >= 0) & (depth >= 0)
    max_d = int(depth[internal].max()) + 1 if internal.any() else 1
    tally = np.zeros((p, max_d), np.int64)
    np.add.at(tally, (feature[internal], depth[internal]), 1)

    flags = {"constant_target": bool(np.ptp(y) == 0.0), "backend": k.__name__.rsplit(".", 1)[-1]}
    return ForestModel(
        params=params, kind=int(kind), feature=feature, threshold=threshold, left=left,
        right=right, depth=depth, node_off=new_off, leaf_mean=leaf_mean, leaf_weight=sw,
        tree_bag=np.arange(T, dtype=np.int64) // params.bag_size, bag_member=bag_member,
        split_rows=split_rows, split_off=split_off, est_rows=est_rows, est_off=est_off,
        est_leaf=est_leaf, weights=w,
        covariate_names=tuple(covariate_names or [f"x{j + 1}" for j in range(p)]),
        fingerprint=fingerprint, outputs=IV_COLUMNS if iv else ("y",), split_tally=tally,
        flags=flags,
    )


def grow_regression_forest(frame, target, params: TreeParams, backend=None) -> ForestModel:
    """Regression forest for ``target`` (a covariate/role name or an array)."""
    if isinstance(target, str):
        lookup = {"y": frame.y, "d": frame.d, "z": frame.z,
                  frame.outcome_name: frame.y}
        y = lookup[target] if target in lookup else frame.column(target)
    else:
        y = target
    if y is None:
        raise ValidationError(f"target {target!r} is not present in the frame")
    return grow_forest(frame.X, y, params, weights=frame.weights, cluster_id=frame.cluster_id,
                       covariate_names=frame.covariate_names, fingerprint=frame.fingerprint(),
                       backend=backend)


def forest_weights(model: ForestModel, x, oob_row: int = -1) -> np.ndarray:
    """Forest weights alpha over training rows for one test point.

    ``oob_row`` excludes every bag containing that training row.
    """
    x = np.asarray(x, float)
    if x.ndim != 1 or x.shape[0] != model.p:
        raise ValidationError(f"test point must have length {model.p}")
    leaves = model.leaf_of(x)
    valid = np.ones(model.n_trees, bool)
    if oob_row >= 0:
        valid = ~model.bag_member[model.tree_bag, oob_row]
    n_valid = int(valid.sum())
    alpha = np.zeros(model.n_train)
    if n_valid == 0:
        return alpha
    hit = np.zeros(model.leaf_weight.shape[0], bool)
    hit[leaves[valid]] = True
    tree_of_est = np.repeat(np.arange(model.n_trees), np.diff(model.est_off))
    g = model.node_off[tree_of_est] + model.est_leaf
    sel = hit[g]
    rows = model.est_rows[sel]
    contrib = model.weights[rows] / model.leaf_weight[g[sel]] / n_valid
    alpha += np.bincount(rows, weights=contrib, minlength=model.n_train)
    return alpha


def depth_weights(max_depth: int, decay: float = 2.0) -> np.ndarray:
    w = np.arange(1, max_depth + 1, dtype=float) ** -decay
    return w / w.sum()


def variable_importance(model: ForestModel, max_depth: int = 4, decay: float = 2.0,
                        exclude=None) -> np.ndarray:
    """Depth-weighted split frequencies. ``exclude`` is a boolean mask of features to zero out.

    Excluded features are dropped from the per-depth totals as well.
    """
    if max_depth < 1:
        raise ValidationError("max_depth must be at least 1")
    tally = np.zeros((model.p, max_depth))
    m = min(max_depth, model.split_tally.shape[1])
    tally[:, :m] = model.split_tally[:, :m]
    if exclude is not None:
        tally[np.asarray(exclude, bool)] = 0
    tot = tally.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        share = np.where(tot > 0, tally / tot, 0.0)
    return share @ depth_weights(max_depth, decay)
