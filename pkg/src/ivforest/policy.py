"""Policy learning: capacity-constrained allocation and exact depth-2 policy trees."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import kernels
from .errors import NumericalError, ValidationError
from .inference import two_group_difference

MAX_DEPTH = 2
ACTIONS = ("no offer", "treat")


def rewards_from_scores(scores, direction: str = "maximize") -> np.ndarray:
    """Per-unit reward of treating; 'minimize' negates the scores."""
    s = np.asarray(getattr(scores, "scores", scores), float)
    if direction not in ("maximize", "minimize"):
        raise ValidationError(f"direction must be 'maximize' or 'minimize', got {direction!r}")
    if not np.isfinite(s).all():
        raise NumericalError("rewards must be finite")
    return s if direction == "maximize" else -s


@dataclass(frozen=True)
class AllocationResult:
    selected: np.ndarray
    K: int
    objective: float
    certified: bool
    cutoff: float
    solver: str = "sort"

    def mask(self, n: int) -> np.ndarray:
        m = np.zeros(n, bool)
        m[self.selected] = True
        return m

    def summary(self) -> dict:
        return {"K": self.K, "objective": self.objective, "certified": self.certified,
                "cutoff": self.cutoff, "solver": self.solver}


def allocate_capacity(rewards, K: int, unit_id=None, solver: str = "sort") -> AllocationResult:
    """Treat exactly K units maximising the summed reward.

    With one cardinality constraint the integer program is solved by the
    K largest rewards; ties at the cutoff go to the smaller unit id. The
    certificate checks that no unselected reward exceeds a selected one.
    ``solver='milp'`` solves the integer program with scipy instead.
    """
    r = np.asarray(rewards, float)
    n = r.shape[0]
    if not (isinstance(K, (int, np.integer)) and 0 < K <= n):
        raise ValidationError(f"K must be an integer in [1, {n}], got {K!r}")
    if not np.isfinite(r).all():
        raise NumericalError("rewards must be finite")
    uid = np.arange(n) if unit_id is None else np.asarray(unit_id)
    if solver == "sort":
        order = np.lexsort((uid, -r))
        sel = np.sort(order[:K])
    elif solver == "milp":
        from scipy.optimize import Bounds, LinearConstraint, milp
        res = milp(-r, constraints=LinearConstraint(np.ones((1, n)), K, K),
                   integrality=np.ones(n), bounds=Bounds(0, 1))
        if not res.success:
            raise NumericalError(f"integer program failed: {res.message}")
        sel = np.flatnonzero(res.x > 0.5)
    else:
        raise ValidationError(f"unknown solver {solver!r}")
    chosen = np.zeros(n, bool)
    chosen[sel] = True
    cutoff = float(r[chosen].min())
    certified = bool(K == n or cutoff >= r[~chosen].max())
    return AllocationResult(sel, int(K), math.fsum(r[chosen]), certified, cutoff, solver)


@dataclass
class PolicyNode:
    feature: int = -1
    threshold: float = math.nan
    left: int = -1
    right: int = -1
    action: int | None = None
    n: int = 0
    share: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0


@dataclass
class PolicyTree:
    nodes: list
    feature_names: tuple[str, ...]
    objective: float
    flags: dict = field(default_factory=dict)

    @property
    def depth(self) -> int:
        def walk(i):
            nd = self.nodes[i]
            return 0 if nd.is_leaf else 1 + max(walk(nd.left), walk(nd.right))
        return walk(0)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, float)
        if X.ndim == 1:
            X = X[None, :]
        out = np.empty(X.shape[0], np.int64)
        node = np.zeros(X.shape[0], np.int64)
        for _ in range(MAX_DEPTH + 1):
            for i in np.unique(node):
                nd = self.nodes[i]
                at = node == i
                if nd.is_leaf:
                    out[at] = nd.action
                else:
                    go_left = X[:, nd.feature] <= nd.threshold
                    node[at & go_left] = nd.left
                    node[at & ~go_left] = nd.right
        return out

    def leaves(self) -> list:
        return [nd for nd in self.nodes if nd.is_leaf]

    def to_dict(self) -> dict:
        nodes = []
        for i, nd in enumerate(self.nodes):
            d = {"id": i, "n": nd.n, "share": nd.share}
            if nd.is_leaf:
                d.update(action=ACTIONS[nd.action], treat=bool(nd.action))
            else:
                d.update(feature=self.feature_names[nd.feature], feature_index=nd.feature,
                         threshold=nd.threshold, left=nd.left, right=nd.right)
            nodes.append(d)
        return {"depth": self.depth, "objective": self.objective, "nodes": nodes,
                "flags": self.flags}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def render(self) -> str:
        lines = []

        def walk(i, indent):
            nd = self.nodes[i]
            pad = "  " * indent
            if nd.is_leaf:
                lines.append(f"{pad}-> {ACTIONS[nd.action]} (n={nd.n}, {100 * nd.share:.1f}%)")
                return
            name = self.feature_names[nd.feature]
            lines.append(f"{pad}{name} <= {nd.threshold:g}")
            walk(nd.left, indent + 1)
            lines.append(f"{pad}{name} > {nd.threshold:g}")
            walk(nd.right, indent + 1)

        walk(0, 0)
        return "\n".join(lines)


def _ranks(X):
    n, p = X.shape
    R = np.empty((n, p), np.int64)
    uniq = []
    for j in range(p):
        u, inv = np.unique(X[:, j], return_inverse=True)
        R[:, j] = inv.ravel()
        uniq.append(u)
    return R, uniq


def _midpoint(u, a):
    lo, hi = u[a], u[a + 1]
    t = 0.5 * (lo + hi)
    return lo if t >= hi else t


def _best_leaf_or_stump(R, U, r, rows):
    """Best depth-<=1 rule on ``rows``: constants first, then splits in
    (feature, cut, action pair) order with the treat action last.

    Returns (value, None | (feature, rank cut), (left action, right action)).
    """
    rs = r[rows]
    T = rs.sum()
    best = (0.0, None, (0, 0))
    if T > best[0]:
        best = (T, None, (1, 1))
    for k in range(R.shape[1]):
        if U[k] < 2:
            continue
        P = np.cumsum(np.bincount(R[rows, k], weights=rs, minlength=U[k]))[:-1]
        for acts, val in (((0, 1), T - P), ((1, 0), P)):
            c = int(np.argmax(val))
            if val[c] > best[0]:
                best = (float(val[c]), (k, c), acts)
    return best


def _exact_value(r, treat):
    return math.fsum(r[treat])


def learn_policy_tree(X, rewards, feature_names=None, allowed=None, depth: int = 2,
                      backend=None) -> PolicyTree:
    """Exact search over axis-aligned trees of depth <= ``depth`` (1 or 2).

    Splits are at midpoints of consecutive unique feature values. Among
    equally good rules a constant beats a split, lower features and
    smaller thresholds win, and treating is tried last.
    """
    if depth > MAX_DEPTH:
        raise ValidationError("exact tree search cost grows exponentially with depth; "
                              "depth > 2 is not supported")
    if depth < 1:
        raise ValidationError("depth must be 1 or 2")
    X = np.asarray(X, float)
    r = np.asarray(rewards, float)
    n, p_all = X.shape
    if r.shape != (n,):
        raise ValidationError("rewards must have one entry per row")
    if not np.isfinite(r).all():
        raise NumericalError("rewards must be finite")
    names = tuple(feature_names or [f"x{j + 1}" for j in range(p_all)])
    cols = np.arange(p_all) if allowed is None else np.asarray(
        [names.index(a) if isinstance(a, str) else int(a) for a in allowed], np.int64)
    if cols.size == 0:
        raise ValidationError("allowed_features must be nonempty")
    Xs = X[:, cols]
    R, uniq = _ranks(Xs)
    U = np.array([u.shape[0] for u in uniq], np.int64)
    all_rows = np.arange(n)

    def leaf(rows, action):
        return PolicyNode(action=int(action), n=int(rows.size), share=rows.size / n)

    def stump(rows, rule):
        val, split, acts = rule
        if split is None:
            return [leaf(rows, acts[0])]
        k, c = split
        go_left = R[rows, k] <= c
        return [PolicyNode(feature=int(cols[k]), threshold=float(_midpoint(uniq[k], c)),
                           n=int(rows.size), share=rows.size / n),
                leaf(rows[go_left], acts[0]), leaf(rows[~go_left], acts[1])]

    # candidates in order of preference; a later one must be strictly better
    candidates = [([leaf(all_rows, int(math.fsum(r) > 0))], 0)]
    one = _best_leaf_or_stump(R, U, r, all_rows)
    if one[1] is not None:
        s_nodes = stump(all_rows, one)
        s_nodes[0].left, s_nodes[0].right = 1, 2
        candidates.append((s_nodes, 1))
    if depth == 2:
        order = np.ascontiguousarray(np.argsort(R, axis=0, kind="stable").T)
        k = kernels.get_backend(backend)
        j, a, _ = k.policy_root_scan(np.ascontiguousarray(R), U, r, order)
        if j >= 0:
            go_left = R[:, j] <= a
            lrows, rrows = all_rows[go_left], all_rows[~go_left]
            root = PolicyNode(feature=int(cols[j]), threshold=float(_midpoint(uniq[j], a)),
                              n=n, share=1.0)
            nodes = [root]
            for side, side_rows in (("left", lrows), ("right", rrows)):
                sub = stump(side_rows, _best_leaf_or_stump(R, U, r, side_rows))
                base = len(nodes)
                setattr(root, side, base)
                if len(sub) == 3:
                    sub[0].left, sub[0].right = base + 1, base + 2
                nodes.extend(sub)
            candidates.append((nodes, 2))

    best_nodes, best_val, best_depth = None, -math.inf, 0
    for nodes, dpt in candidates:
        tree = PolicyTree(nodes, names, 0.0)
        val = _exact_value(r, tree.predict(X) == 1)
        if val > best_val:
            best_nodes, best_val, best_depth = nodes, val, dpt
    flags = {"constant": best_depth == 0, "no_improving_split": best_depth == 0,
             "allowed_features": [names[c] for c in cols], "requested_depth": depth}
    return PolicyTree(best_nodes, names, best_val, flags)


def learn_policy_tree_frame(frame, rewards, allowed_features, depth: int = 2, backend=None):
    return learn_policy_tree(frame.X, rewards, frame.covariate_names, allowed_features, depth,
                             backend)


def profile_allocation(X, names, selected, reference, cluster) -> pd.DataFrame:
    """Covariate means of the selected set against a reference set."""
    X = np.asarray(X, float)
    n = X.shape[0]

    def as_mask(s):
        s = np.asarray(s)
        if s.dtype == bool:
            return s
        m = np.zeros(n, bool)
        m[s] = True
        return m

    a, b = as_mask(selected), as_mask(reference)
    if not a.any() or not b.any():
        raise ValidationError("both sets must be nonempty")
    rows = []
    for j, name in enumerate(names):
        ma, mb, diff, se, t, p = two_group_difference(X[:, j], a, b, cluster)
        rows.append({"variable": name, "mean_selected": ma, "mean_reference": mb,
                     "difference": diff, "se": se, "t": t, "p_value": p})
    out = pd.DataFrame(rows)
    out.attrs["overlap"] = int((a & b).sum())
    out.attrs["n_selected"] = int(a.sum())
    out.attrs["n_reference"] = int(b.sum())
    return out
