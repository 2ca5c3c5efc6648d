"""Variance estimation, normal-approximation intervals and cluster-robust covariances."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import ValidationError

VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class LittleBagsConfig:
    bag_size: int = 4
    floor: float = VARIANCE_FLOOR

    def __post_init__(self):
        if self.bag_size < 2:
            raise ValidationError("bag_size must be at least 2 for a within-bag correction")


@dataclass(frozen=True)
class VarianceResult:
    variance: np.ndarray
    raw: np.ndarray
    n_floored: int


def floor_variance(raw, floor=VARIANCE_FLOOR) -> VarianceResult:
    raw = np.asarray(raw, float)
    low = np.isfinite(raw) & (raw < floor)
    var = np.where(low, floor, raw)
    return VarianceResult(var, raw, int(low.sum()))


def little_bags_variance(forest, X, oob=False, floor=VARIANCE_FLOOR, backend=None) -> VarianceResult:
    """Debiased between-bag variance of the forest's tau(x) at each point.

    Bag means are averaged over trees in the bag; the within-bag spread
    divided by the bag size is subtracted, then results below ``floor``
    are floored (the count is reported).
    """
    if forest.bag_size < 2:
        raise ValidationError("forest was grown without little bags (bag_size < 2); refit with bag_size >= 2")
    _, _, raw, _ = forest.predict_iv_raw(X, oob=oob, variance=True, backend=backend)
    return floor_variance(raw, floor)


def normal_p_value(estimate, se):
    est = np.asarray(estimate, float)
    se = np.asarray(se, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, est / se, np.where(est == 0, 0.0, np.inf))
    return 2.0 * stats.norm.sf(np.abs(z))


def normal_ci(estimate, se, level=0.95):
    q = stats.norm.ppf(0.5 + level / 2.0)
    est = np.asarray(estimate, float)
    return est - q * np.asarray(se), est + q * np.asarray(se)


@dataclass(frozen=True)
class SignificanceSummary:
    level: float
    share_positive_sig: float
    share_negative_sig: float
    share_null: float

    def to_dict(self) -> dict:
        return {"level": self.level, "share_positive_sig": self.share_positive_sig,
                "share_negative_sig": self.share_negative_sig, "share_null": self.share_null}


def classify_significance(tau, se, levels=(0.05, 0.10)):
    """Two-sided z-test flags per level and positive/negative/null shares.

    Returns (flags: {level: bool array}, summaries: [SignificanceSummary]).
    """
    tau = np.asarray(tau, float)
    p = normal_p_value(tau, se)
    flags, summaries = {}, []
    n = max(tau.shape[0], 1)
    for lv in levels:
        sig = p < lv
        flags[lv] = sig
        pos = int((sig & (tau > 0)).sum())
        neg = int((sig & (tau < 0)).sum())
        summaries.append(SignificanceSummary(float(lv), pos / n, neg / n, (n - pos - neg) / n))
    return flags, summaries


def _cluster_codes(cluster):
    _, codes = np.unique(np.asarray(cluster), return_inverse=True)
    return codes, int(codes.max()) + 1 if codes.size else 0


def cluster_robust_cov(X, u, cluster, bread=None, small_sample=False) -> np.ndarray:
    """Sandwich covariance with cluster-summed scores ``X_i u_i``.

    ``bread`` defaults to inv(X'X). With singleton clusters and no
    small-sample factor this is the HC0 covariance.
    """
    X = np.asarray(X, float)
    if X.ndim == 1:
        X = X[:, None]
    u = np.asarray(u, float)
    n, k = X.shape
    codes, G = _cluster_codes(cluster)
    if G < k:
        raise ValidationError(f"{G} clusters is fewer than the {k} regressors")
    if bread is None:
        bread = np.linalg.inv(X.T @ X)
    scores = np.zeros((G, k))
    np.add.at(scores, codes, X * u[:, None])
    meat = scores.T @ scores
    V = bread @ meat @ bread
    if small_sample:
        V *= G / (G - 1) * (n - 1) / (n - k)
    return V


def cluster_robust_se_2sls(fit, frame=None) -> np.ndarray:
    """Cluster-robust standard errors for a fitted 2SLS model (all coefficients)."""
    cluster = fit.cluster if frame is None else frame.cluster_id[fit.rows]
    V = cluster_robust_cov(fit.design_hat, fit.residuals, cluster, bread=fit.bread)
    return np.sqrt(np.diag(V))


def cluster_mean_se(values, cluster) -> float:
    """Cluster-robust standard error of a sample mean, with a G/(G-1) factor."""
    v = np.asarray(values, float)
    n = v.shape[0]
    if n == 0:
        raise ValidationError("empty sample")
    codes, G = _cluster_codes(cluster)
    if G < 2:
        return float("nan")
    s = np.bincount(codes, weights=v - v.mean(), minlength=G)
    return float(np.sqrt(G / (G - 1) * np.sum(s * s)) / n)


def two_group_difference(values, in_a, in_b, cluster):
    """Mean(A) - mean(B) with a cluster-robust t-test; groups may overlap.

    Rows in both groups enter twice (once per group) and keep their
    cluster, so overlap is handled through the clustered covariance.
    Returns (mean_a, mean_b, diff, se, t, p) with p from t(G - 1).
    """
    v = np.asarray(values, float)
    in_a = np.asarray(in_a, bool)
    in_b = np.asarray(in_b, bool)
    na, nb = int(in_a.sum()), int(in_b.sum())
    ma = float(v[in_a].mean()) if na else float("nan")
    mb = float(v[in_b].mean()) if nb else float("nan")
    if na == 0 or nb == 0:
        return ma, mb, float("nan"), float("nan"), float("nan"), float("nan")
    codes, G = _cluster_codes(cluster)
    psi = np.zeros(G)
    np.add.at(psi, codes[in_a], (v[in_a] - ma) / na)
    np.add.at(psi, codes[in_b], -(v[in_b] - mb) / nb)
    diff = ma - mb
    se = float(np.sqrt(G / (G - 1) * np.sum(psi * psi))) if G > 1 else float("nan")
    if se > 0:
        t = diff / se
        p = float(2 * stats.t.sf(abs(t), df=max(G - 1, 1)))
    else:
        t = 0.0 if diff == 0 else float("inf")
        p = 1.0 if diff == 0 else 0.0
    return ma, mb, diff, se, t, p
