"""Doubly robust aggregation, subgroup effects, quantile tables and histograms."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import NumericalError, ValidationError, WeakIdentificationError
from .inference import cluster_mean_se, normal_ci, normal_p_value, two_group_difference

PROPENSITY_CLIP = (0.01, 0.99)
MIN_MEAN_COMPLIANCE = 0.05


@dataclass
class DoublyRobustScores:
    scores: np.ndarray
    estimand: str
    cluster: np.ndarray
    components: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    @property
    def estimate(self) -> float:
        return float(np.mean(self.scores))

    def __len__(self):
        return int(self.scores.shape[0])


@dataclass(frozen=True)
class EffectEstimate:
    name: str
    estimate: float
    se: float
    p_value: float
    ci_low: float
    ci_high: float
    share: float
    n: int

    def to_dict(self) -> dict:
        return {"name": self.name, "estimate": self.estimate, "se": self.se,
                "p_value": self.p_value, "ci_low": self.ci_low, "ci_high": self.ci_high,
                "share": self.share, "n": self.n}


GateResult = EffectEstimate


def clip_propensity(z_hat, clip=PROPENSITY_CLIP):
    z_hat = np.asarray(z_hat, float)
    clipped = np.clip(z_hat, *clip)
    return clipped, int((clipped != z_hat).sum())


def compute_dr_scores_itt(y, z, z_hat, m1, m0, cluster=None) -> DoublyRobustScores:
    """AIPW scores for the effect of the instrument itself.

    m1 and m0 are outcome regressions under z = 1 and z = 0.
    """
    y, z, m1, m0 = (np.asarray(v, float) for v in (y, z, m1, m0))
    zh, n_clip = clip_propensity(z_hat)
    g = m1 - m0 + z / zh * (y - m1) - (1 - z) / (1 - zh) * (y - m0)
    if not np.isfinite(g).all():
        raise NumericalError("non-finite ITT scores")
    cl = np.arange(y.shape[0]) if cluster is None else np.asarray(cluster)
    return DoublyRobustScores(g, "itt", cl, {"z_hat": zh, "m1": m1, "m0": m0},
                              {"n_propensity_clipped": n_clip})


def itt_outcome_regressions(y_hat, z_hat, tau_itt):
    """m(x, 1) and m(x, 0) from the marginal mean and a local ITT effect."""
    y_hat, z_hat, tau_itt = (np.asarray(v, float) for v in (y_hat, z_hat, tau_itt))
    return y_hat + (1 - z_hat) * tau_itt, y_hat - z_hat * tau_itt


def compute_dr_scores_late(y, d, z, z_hat, y_hat, d_hat, tau, compliance, cluster=None,
                           mode: str = "local", min_compliance: float = MIN_MEAN_COMPLIANCE
                           ) -> DoublyRobustScores:
    """AIPW scores for the local average treatment effect.

    ``mode='local'`` divides the residual term by the per-unit first-stage
    effect (floored at ``min_compliance``); ``mode='mean'`` divides by its
    sample mean.
    """
    y, d, z, y_hat, d_hat, tau, comp = (np.asarray(v, float) for v in
                                        (y, d, z, y_hat, d_hat, tau, compliance))
    zh, n_clip = clip_propensity(z_hat)
    comp = np.where(np.isfinite(comp), comp, np.nan)
    mean_comp = float(np.nanmean(comp))
    if not mean_comp >= min_compliance:
        raise WeakIdentificationError(
            f"mean compliance {mean_comp:.4f} is below {min_compliance}; instrument too weak")
    if mode == "local":
        comp = np.where(np.isfinite(comp), comp, mean_comp)
        n_floor = int((comp < min_compliance).sum())
        denom = np.maximum(comp, min_compliance)
    elif mode == "mean":
        n_floor = 0
        denom = np.full_like(y, mean_comp)
    else:
        raise ValidationError(f"unknown compliance mode {mode!r}")
    resid = y - y_hat - tau * (d - d_hat)
    g = tau + (z - zh) / (zh * (1 - zh)) * resid / denom
    if not np.isfinite(g).all():
        raise NumericalError("non-finite LATE scores")
    cl = np.arange(y.shape[0]) if cluster is None else np.asarray(cluster)
    return DoublyRobustScores(
        g, "late", cl,
        {"z_hat": zh, "y_hat": y_hat, "d_hat": d_hat, "tau": tau, "compliance": denom},
        {"n_propensity_clipped": n_clip, "n_compliance_floored": n_floor,
         "mean_compliance": mean_comp, "mode": mode})


def scores_from_model(model, frame, mode: str = "local") -> DoublyRobustScores:
    """Scores for the model's estimand from its out-of-bag training outputs."""
    tau = np.where(model.fallback_oob, model.wald_tau, model.tau_oob)
    if model.estimand == "itt":
        m1, m0 = itt_outcome_regressions(model.y_hat, model.z_hat, tau)
        return compute_dr_scores_itt(frame.y, frame.z, model.z_hat, m1, m0, frame.cluster_id)
    return compute_dr_scores_late(frame.y, frame.d, frame.z, model.z_hat, model.y_hat,
                                  model.d_hat, tau, model.compliance_oob, frame.cluster_id,
                                  mode=mode)


def itt_scores_from_model(model, frame) -> DoublyRobustScores:
    """ITT scores from any fitted model.

    For a LATE model the local ITT effect is tau(x) times the local first
    stage; non-finite first stages take the sample mean.
    """
    tau = np.where(model.fallback_oob, model.wald_tau, model.tau_oob)
    if model.estimand == "late":
        comp = np.asarray(model.compliance_oob, float)
        comp = np.where(np.isfinite(comp), comp, np.nanmean(comp))
        tau = tau * comp
    m1, m0 = itt_outcome_regressions(model.y_hat, model.z_hat, tau)
    return compute_dr_scores_itt(frame.y, frame.z, model.z_hat, m1, m0, frame.cluster_id)


def gate(scores: DoublyRobustScores, mask=None, name: str = "all", level: float = 0.95
         ) -> EffectEstimate:
    """Mean score over a subgroup with a household-clustered standard error."""
    n = len(scores)
    mask = np.ones(n, bool) if mask is None else np.asarray(mask, bool)
    if mask.shape != (n,):
        raise ValidationError("mask length does not match the scores")
    if not mask.any():
        raise ValidationError(f"subgroup {name!r} is empty")
    g = scores.scores[mask]
    est = float(np.mean(g))
    se = cluster_mean_se(g, scores.cluster[mask])
    lo, hi = normal_ci(est, se, level)
    return EffectEstimate(name, est, se, float(normal_p_value(est, se)), float(lo), float(hi),
                          float(mask.mean()), int(mask.sum()))


def average_effect(scores: DoublyRobustScores, level: float = 0.95) -> EffectEstimate:
    return gate(scores, None, scores.estimand, level)


QUANTILE_PROBS = (0.0, 0.25, 0.5, 0.75, 1.0)


def ite_quantiles(values, probs=QUANTILE_PROBS) -> dict[float, float]:
    v = np.asarray(values, float)
    if v.size == 0:
        raise ValidationError("empty vector")
    q = np.quantile(v, probs, method="linear")
    return {float(p): float(x) for p, x in zip(probs, q)}


def quantile_table(named_values: dict, probs=QUANTILE_PROBS) -> pd.DataFrame:
    """One row per outcome: mean followed by the requested quantiles."""
    rows = []
    for name, v in named_values.items():
        q = ite_quantiles(v, probs)
        rows.append({"outcome": name, "mean": float(np.mean(v)),
                     **{f"q{int(round(p * 100)):02d}": x for p, x in q.items()}})
    return pd.DataFrame(rows)


def profile_by_effect_sign(X, names, tau, cluster, significant=None) -> pd.DataFrame:
    """Covariate means for units with tau > 0 against tau <= 0.

    Passing ``significant`` restricts both groups to units flagged there.
    """
    X = np.asarray(X, float)
    tau = np.asarray(tau, float)
    keep = np.ones(tau.shape, bool) if significant is None else np.asarray(significant, bool)
    inc = (tau > 0) & keep
    dec = (tau <= 0) & keep
    rows = []
    for j, name in enumerate(names):
        ma, mb, diff, se, t, p = two_group_difference(X[:, j], inc, dec, cluster)
        rows.append({"variable": name, "mean_increase": ma, "mean_decrease": mb,
                     "difference": diff, "se": se, "t": t, "p_value": p})
    out = pd.DataFrame(rows)
    out.attrs["n_increase"] = int(inc.sum())
    out.attrs["n_decrease"] = int(dec.sum())
    out.attrs["empty_side"] = ("increase" if not inc.any() else
                               "decrease" if not dec.any() else None)
    return out


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    sig_counts: np.ndarray | None
    width: float
    n_trimmed: int
    rule: str

    def to_dict(self) -> dict:
        return {"edges": self.edges.tolist(), "counts": self.counts.tolist(),
                "sig_counts": None if self.sig_counts is None else self.sig_counts.tolist(),
                "width": self.width, "n_retained": int(self.counts.sum()),
                "n_trimmed": self.n_trimmed, "rule": self.rule}


def trim_tails(values, trim=0.005, flags=None):
    """Drop floor(trim * n) values from each end by rank (stable for ties)."""
    v = np.asarray(values, float)
    n = v.shape[0]
    k = int(math.floor(trim * n))
    order = np.argsort(v, kind="stable")
    keep = order[k:n - k]
    return v[keep], (None if flags is None else np.asarray(flags, bool)[keep]), 2 * k


def freedman_diaconis_width(values) -> float:
    v = np.asarray(values, float)
    q75, q25 = np.percentile(v, [75, 25])
    return 2.0 * (q75 - q25) * v.shape[0] ** (-1.0 / 3.0)


def histogram_bins(values, trim: float = 0.005, significant=None) -> Histogram:
    """Freedman-Diaconis histogram of the tail-trimmed values.

    IQR and n refer to the trimmed sample. A zero IQR falls back to the
    Sturges bin count; a constant sample yields one bin.
    """
    v = np.asarray(values, float)
    if v.size == 0:
        raise ValidationError("empty vector")
    kept, flags, n_trim = trim_tails(v, trim, significant)
    lo, hi = float(kept.min()), float(kept.max())
    h = freedman_diaconis_width(kept)
    if h > 0:
        nb = max(1, int(math.ceil((hi - lo) / h)))
        edges = lo + h * np.arange(nb + 1)
        if edges[-1] < hi:
            edges = np.append(edges, edges[-1] + h)
        rule = "freedman-diaconis"
    elif hi > lo:
        nb = int(math.ceil(math.log2(kept.shape[0]))) + 1
        edges = np.linspace(lo, hi, nb + 1)
        h = (hi - lo) / nb
        rule = "sturges"
    else:
        edges = np.array([lo - 0.5, lo + 0.5])
        h = 1.0
        rule = "sturges"
    counts, _ = np.histogram(kept, edges)
    sig = None if flags is None else np.histogram(kept[flags], edges)[0]
    return Histogram(edges, counts, sig, float(h), n_trim, rule)
