"""Linear two-stage least squares with household-clustered standard errors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError, ValidationError, WeakIdentificationError
from .inference import cluster_robust_cov, normal_p_value


@dataclass(eq=False)
class TwoSlsFit:
    coef: np.ndarray
    names: tuple[str, ...]
    se: np.ndarray
    first_stage_f: float
    n: int
    rows: np.ndarray
    cluster: np.ndarray
    design_hat: np.ndarray
    residuals: np.ndarray
    bread: np.ndarray

    @property
    def late(self) -> float:
        return float(self.coef[0])

    @property
    def late_se(self) -> float:
        return float(self.se[0])

    @property
    def p_value(self) -> float:
        return float(normal_p_value(self.late, self.late_se))

    def summary(self, name: str = "2sls") -> dict:
        return {"name": name, "estimate": self.late, "se": self.late_se,
                "p_value": self.p_value, "first_stage_f": self.first_stage_f, "n": self.n}


def _lstsq_qr(A, b):
    Q, R = np.linalg.qr(A)
    diag = np.abs(np.diag(R))
    if diag.size and diag.min() <= 1e-10 * max(diag.max(), 1.0):
        raise DataError("rank-deficient design")
    return np.linalg.solve(R, Q.T @ b)


def strata_controls(strata) -> tuple[np.ndarray, tuple[str, ...]]:
    """Indicator columns for each stratum variable, first level dropped."""
    if strata is None:
        return np.empty((0, 0)), ()
    s = np.asarray(strata)
    if s.ndim == 1:
        s = s[:, None]
    cols, names = [], []
    for k in range(s.shape[1]):
        levels, code = np.unique(s[:, k], return_inverse=True)
        for lv in range(1, levels.shape[0]):
            cols.append((code == lv).astype(float))
            names.append(f"stratum{k}={levels[lv]}")
    if not cols:
        return np.empty((s.shape[0], 0)), ()
    return np.column_stack(cols), tuple(names)


def fit_2sls(y, d, z, controls=None, cluster=None, control_names=None, small_sample=False,
             min_f: float = 1.0) -> TwoSlsFit:
    """Just-identified 2SLS of y on d instrumented by z, with an intercept and controls.

    Coefficient order: d, intercept, controls. The covariance is the
    cluster sandwich without a small-sample factor unless requested.
    """
    y, d, z = (np.asarray(v, float) for v in (y, d, z))
    n = y.shape[0]
    W = np.ones((n, 1))
    names = ["d", "const"]
    if controls is not None and np.size(controls):
        C = np.asarray(controls, float).reshape(n, -1)
        W = np.column_stack([W, C])
        names += list(control_names or [f"c{j}" for j in range(C.shape[1])])
    cluster = np.arange(n) if cluster is None else np.asarray(cluster)
    Zm = np.column_stack([z, W])
    k = Zm.shape[1]
    if n <= k:
        raise DataError("more regressors than observations")
    pi = _lstsq_qr(Zm, d)
    d_fit = Zm @ pi
    v = d - d_fit
    s2 = v @ v / (n - k)
    ZtZ_inv = np.linalg.inv(Zm.T @ Zm)
    if not s2 > 0:
        f_stat = np.inf
    else:
        f_stat = float(pi[0] ** 2 / (s2 * ZtZ_inv[0, 0]))
    if not f_stat >= min_f:
        raise WeakIdentificationError(f"first-stage F = {f_stat:.3f} is below {min_f}")
    Xh = np.column_stack([d_fit, W])
    beta = _lstsq_qr(Xh, y)
    u = y - np.column_stack([d, W]) @ beta
    bread = np.linalg.inv(Xh.T @ Xh)
    V = cluster_robust_cov(Xh, u, cluster, bread=bread, small_sample=small_sample)
    se = np.sqrt(np.diag(V))
    if not np.isfinite(beta).all():
        raise NumericalError("non-finite 2SLS coefficients")
    return TwoSlsFit(beta, tuple(names), se, f_stat, n, np.arange(n), cluster, Xh, u, bread)


def fit_2sls_frame(frame, outcome=None, mask=None, small_sample=False) -> TwoSlsFit:
    """2SLS on a frame with stratum indicators as controls; ``mask`` selects rows."""
    if frame.d is None:
        raise ValidationError("2SLS needs a treatment column")
    y = frame.y if outcome is None else outcome
    if y is None:
        raise ValidationError("frame has no outcome")
    rows = np.arange(frame.n) if mask is None else np.flatnonzero(np.asarray(mask, bool))
    if rows.size == 0:
        raise ValidationError("subgroup is empty")
    strata = None if frame.strata is None else frame.strata[rows]
    C, names = strata_controls(strata)
    fit = fit_2sls(np.asarray(y)[rows], frame.d[rows], frame.z[rows], C if C.size else None,
                   frame.cluster_id[rows], names, small_sample=small_sample)
    fit.rows = rows
    return fit


def fit_2sls_subgroup(frame, mask, outcome=None, small_sample=False) -> TwoSlsFit:
    return fit_2sls_frame(frame, outcome, mask, small_sample)


def residualized_iv(y, d, z, controls=None) -> float:
    """Closed-form IV coefficient after partialling the controls out (reference algebra)."""
    y, d, z = (np.asarray(v, float) for v in (y, d, z))
    n = y.shape[0]
    W = np.ones((n, 1))
    if controls is not None and np.size(controls):
        W = np.column_stack([W, np.asarray(controls, float).reshape(n, -1)])
    P = W @ np.linalg.pinv(W)
    zt = z - P @ z
    return float((zt @ (y - P @ y)) / (zt @ (d - P @ d)))
