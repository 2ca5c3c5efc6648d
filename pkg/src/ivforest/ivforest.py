"""Instrumental causal forest: local moment solving and per-unit effects."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import kernels
from .errors import DataError, ValidationError, WeakIdentificationError
from .forest import ForestModel, TreeParams, grow_forest, save_arrays
from .inference import floor_variance, normal_ci, normal_p_value

WEAK_COV_TOL = kernels.WEAK_COV_TOL
PROPENSITY_CLIP = (0.01, 0.99)
MODEL_VERSION = 1


def solve_local_moment(alpha, y, d, z):
    """Solve sum_i alpha_i (y_i - mu - tau d_i)(1, z_i) = 0 for (tau, mu).

    Weights are normalised first. Binary instruments use the equivalent
    difference-of-means form, so uniform weights give the plain Wald ratio.
    """
    a = np.asarray(alpha, float)
    y = np.asarray(y, float)
    d = np.asarray(d, float)
    z = np.asarray(z, float)
    if (a < 0).any():
        raise ValidationError("weights must be nonnegative")
    tot = a.sum()
    if not tot > 0:
        raise ValidationError("weights sum to zero")
    a = a / tot
    uniform = bool(np.all(a == a[0]))
    binary = bool(np.isin(z[a > 0], (0.0, 1.0)).all())
    if binary:
        on = z == 1.0
        s1 = a[on].sum()
        s0 = a[~on].sum()
        if not (s1 > 0 and s0 > 0):
            raise WeakIdentificationError("instrument has no weighted variance")
        if uniform:
            y1, y0, d1, d0 = y[on].mean(), y[~on].mean(), d[on].mean(), d[~on].mean()
        else:
            y1 = np.dot(a[on], y[on]) / s1
            y0 = np.dot(a[~on], y[~on]) / s0
            d1 = np.dot(a[on], d[on]) / s1
            d0 = np.dot(a[~on], d[~on]) / s0
        if abs(s1 * s0 * (d1 - d0)) < WEAK_COV_TOL:
            raise WeakIdentificationError("weighted Cov(Z, D) below tolerance")
        tau = (y1 - y0) / (d1 - d0)
        mu = (s1 * y1 + s0 * y0) - tau * (s1 * d1 + s0 * d0)
        return float(tau), float(mu)
    zbar = np.dot(a, z)
    if not np.dot(a, (z - zbar) ** 2) > 0:
        raise WeakIdentificationError("instrument has no weighted variance")
    ybar = np.dot(a, y)
    dbar = np.dot(a, d)
    czd = np.dot(a, (z - zbar) * (d - dbar))
    if abs(czd) < WEAK_COV_TOL:
        raise WeakIdentificationError("weighted Cov(Z, D) below tolerance")
    tau = np.dot(a, (z - zbar) * (y - ybar)) / czd
    return float(tau), float(ybar - tau * dbar)


def wald_estimate(y, d, z, cluster=None, weights=None):
    """Full-sample IV ratio with a cluster-robust delta-method standard error."""
    y, d, z = (np.asarray(v, float) for v in (y, d, z))
    w = np.ones_like(y) if weights is None else np.asarray(weights, float)
    tau, _ = solve_local_moment(w, y, d, z)
    sw = w.sum()
    zbar = np.dot(w, z) / sw
    ybar = np.dot(w, y) / sw
    dbar = np.dot(w, d) / sw
    czd = np.dot(w, (z - zbar) * (d - dbar)) / sw
    psi = w * (z - zbar) * (y - ybar - tau * (d - dbar)) / czd / sw
    cl = np.arange(y.shape[0]) if cluster is None else np.unique(cluster, return_inverse=True)[1]
    s = np.bincount(cl, weights=psi)
    return tau, float(np.sqrt(np.sum(s * s)))


def instrument_propensity(z, strata=None, weights=None) -> np.ndarray:
    """Per-unit instrument rate within its stratum cell (global rate without strata)."""
    z = np.asarray(z, float)
    w = np.ones_like(z) if weights is None else np.asarray(weights, float)
    if strata is None or np.size(strata) == 0:
        return np.full(z.shape, np.dot(w, z) / w.sum())
    s = np.asarray(strata)
    if s.ndim == 1:
        s = s[:, None]
    _, cell = np.unique(s, axis=0, return_inverse=True)
    cell = cell.ravel()
    rate = np.bincount(cell, weights=w * z) / np.bincount(cell, weights=w)
    return rate[cell]


@dataclass(frozen=True)
class NuisanceParams:
    n_trees: int | None = None
    min_node_size: int = 5

    def resolve(self, params: TreeParams) -> TreeParams:
        n = self.n_trees if self.n_trees is not None else max(50, params.n_trees // 4)
        return params.replace(n_trees=n, bag_size=1, min_node_size=self.min_node_size,
                              seed=params.seed + 7919)


@dataclass(eq=False)
class IvForestModel:
    """IV forest plus out-of-bag training outputs used by aggregation."""

    forest: ForestModel
    center: bool
    estimand: str
    y_hat: np.ndarray
    d_hat: np.ndarray
    z_hat: np.ndarray
    tau_oob: np.ndarray
    var_oob_raw: np.ndarray
    compliance_oob: np.ndarray
    fallback_oob: np.ndarray
    wald_tau: float
    wald_se: float
    flags: dict = field(default_factory=dict)
    y_model: ForestModel | None = None
    d_model: ForestModel | None = None

    @property
    def n_train(self) -> int:
        return self.forest.n_train

    def save(self, path) -> None:
        arrays = self.forest.to_arrays("iv.")
        for k in ("y_hat", "d_hat", "z_hat", "tau_oob", "var_oob_raw", "compliance_oob",
                  "fallback_oob"):
            arrays["oob." + k] = getattr(self, k)
        meta = {"model_version": MODEL_VERSION, "center": self.center, "estimand": self.estimand,
                "wald_tau": self.wald_tau, "wald_se": self.wald_se, "flags": self.flags}
        arrays["model_meta"] = np.array(json.dumps(meta))
        save_arrays(path, arrays)

    @classmethod
    def load(cls, path) -> "IvForestModel":
        with np.load(Path(path), allow_pickle=False) as f:
            if "model_meta" not in f.files:
                raise DataError(f"{path} is not an IV forest model file")
            meta = json.loads(str(f["model_meta"]))
            if meta["model_version"] != MODEL_VERSION:
                raise DataError(f"unsupported model version {meta['model_version']}")
            forest = ForestModel.from_arrays(f, "iv.")
            oob = {k[4:]: np.asarray(f[k]) for k in f.files if k.startswith("oob.")}
        return cls(forest=forest, center=meta["center"], estimand=meta["estimand"],
                   wald_tau=meta["wald_tau"], wald_se=meta["wald_se"], flags=meta["flags"], **oob)


def _local_compliance(M):
    with np.errstate(invalid="ignore", divide="ignore"):
        return (M[:, 4] - M[:, 2] * M[:, 1]) / (M[:, 5] - M[:, 2] ** 2)


def fit_iv_forest(frame, params: TreeParams | None = None, center: bool = True,
                  estimand: str = "late", nuisance: NuisanceParams | None = None,
                  oob_variance: bool = True, backend=None) -> IvForestModel:
    """Grow an instrumental forest on a frame.

    ``estimand='itt'`` uses the instrument as the treatment, so the forest
    estimates intent-to-treat effects and no treatment column is needed.
    With ``center`` the outcome and treatment are residualised on
    out-of-bag regression forests and the instrument on its design rate.
    ``oob_variance=False`` skips the out-of-bag variance estimates.
    """
    params = params or TreeParams()
    if estimand not in ("late", "itt"):
        raise ValidationError(f"unknown estimand {estimand!r}")
    if frame.y is None:
        raise ValidationError("frame has no outcome")
    z = np.asarray(frame.z, float)
    if estimand == "itt":
        d = z
    elif frame.d is None:
        raise ValidationError("LATE needs a treatment column; use estimand='itt' otherwise")
    else:
        d = np.asarray(frame.d, float)
    y = np.asarray(frame.y, float)
    w = frame.weights
    if np.ptp(z) == 0:
        raise WeakIdentificationError("instrument is constant; no first stage")
    try:
        wald_tau, wald_se = wald_estimate(y, d, z, frame.cluster_id, w)
    except WeakIdentificationError as exc:
        raise WeakIdentificationError(f"full-sample first stage is degenerate: {exc}") from None

    z_hat = instrument_propensity(z, frame.strata, w)
    common = dict(weights=w, cluster_id=frame.cluster_id, covariate_names=frame.covariate_names,
                  fingerprint=frame.fingerprint(), backend=backend)
    y_model = d_model = None
    if center:
        nparams = (nuisance or NuisanceParams()).resolve(params)
        y_model = grow_forest(frame.X, y, nparams, **common)
        y_hat = y_model.predict(frame.X, oob=True, backend=backend)
        if estimand == "itt":
            d_hat = z_hat
        else:
            d_model = grow_forest(frame.X, d, nparams.replace(seed=nparams.seed + 1), **common)
            d_hat = d_model.predict(frame.X, oob=True, backend=backend)
        yc, dc, zc = y - y_hat, d - d_hat, z - z_hat
    else:
        yc, dc, zc = y, d, z

    forest = grow_forest(frame.X, yc, params, d=dc, z=zc, kind=kernels.KIND_IV, **common)
    M, tau, var_raw, n_valid = forest.predict_iv_raw(frame.X, oob=True,
                                                     variance=oob_variance and forest.bag_size >= 2,
                                                     backend=backend)
    if not center:
        # local forest means serve as the outcome and treatment regressions
        ok = n_valid > 0
        y_hat = np.where(ok, M[:, 0], np.average(y, weights=w))
        d_hat = np.where(ok, M[:, 1], np.average(d, weights=w))
    compliance = _local_compliance(M)
    if estimand == "itt":
        compliance = np.ones_like(compliance)
    fallback = ~np.isfinite(tau)
    flags = {"n_fallback": int(fallback.sum()), "n_no_oob_trees": int((n_valid == 0).sum()),
             "params": asdict(params)}
    return IvForestModel(
        forest=forest, center=center, estimand=estimand, y_hat=y_hat, d_hat=d_hat, z_hat=z_hat,
        tau_oob=tau, var_oob_raw=var_raw, compliance_oob=compliance, fallback_oob=fallback,
        wald_tau=float(wald_tau), wald_se=float(wald_se), flags=flags, y_model=y_model,
        d_model=d_model,
    )


@dataclass
class IteEstimate:
    """Per-point effect estimates; every field is an array over points."""

    tau_hat: np.ndarray
    variance: np.ndarray
    se: np.ndarray
    p_value: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    sig10: np.ndarray
    sig05: np.ndarray
    fallback: np.ndarray
    n_floored: int = 0

    def __len__(self):
        return int(self.tau_hat.shape[0])

    def to_frame(self, unit_id=None) -> pd.DataFrame:
        uid = np.arange(len(self)) if unit_id is None else np.asarray(unit_id)
        return pd.DataFrame({
            "unit_id": uid, "tau_hat": self.tau_hat, "se": self.se, "p_value": self.p_value,
            "ci_low": self.ci_low, "ci_high": self.ci_high,
            "sig10": self.sig10.astype(int), "sig05": self.sig05.astype(int),
        })

    def to_csv(self, path, unit_id=None) -> None:
        self.to_frame(unit_id).to_csv(path, index=False)


def make_estimates(tau, raw_var, fallback_tau=np.nan, fallback_var=np.nan, level=0.95) -> IteEstimate:
    tau = np.asarray(tau, float).copy()
    fb = ~np.isfinite(tau)
    tau[fb] = fallback_tau
    fv = floor_variance(raw_var)
    var = fv.variance.copy()
    var[fb] = fallback_var
    se = np.sqrt(var)
    lo, hi = normal_ci(tau, se, level)
    p = normal_p_value(tau, se)
    return IteEstimate(tau, var, se, p, lo, hi, p < 0.10, p < 0.05, fb, fv.n_floored)


def predict_ite(model: IvForestModel, X=None, level: float = 0.95, variance: bool = True,
                backend=None) -> IteEstimate:
    """Effect estimates at test points; ``X=None`` gives out-of-bag training estimates.

    Points whose local first stage is degenerate fall back to the
    full-sample IV estimate and are flagged.
    """
    if X is None:
        tau, raw = model.tau_oob, model.var_oob_raw
        if not variance:
            raw = np.full_like(tau, np.nan)
    else:
        _, tau, raw, _ = model.forest.predict_iv_raw(X, variance=variance, backend=backend)
    return make_estimates(tau, raw, model.wald_tau, model.wald_se ** 2, level)
