"""Simulated lottery data with known effects, plus a brute-force policy oracle."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .dataset import ObservationFrame, Schema, build_frame
from .errors import ValidationError

TAU_KINDS = ("constant", "step", "rule")
NOISE_KINDS = ("gaussian", "t4")
TYPE_NAMES = ("always", "never", "complier")
# Y(0) shift by compliance type, so types differ in baseline outcome
TYPE_SHIFT = np.array([0.2, -0.1, 0.0])


@dataclass(frozen=True)
class DgpSpec:
    n: int = 2000
    p: int = 5
    tau: str = "step"
    tau_value: float = 0.5
    share_always: float = 0.1
    share_never: float = 0.5
    share_complier: float = 0.4
    noise: str = "gaussian"
    noise_scale: float = 1.0
    cluster_sizes: tuple[float, ...] = (0.7, 0.2, 0.1)
    z_rate: tuple[float, ...] = (0.5,)
    seed: int = 0
    mu_coef: float = 0.3

    def __post_init__(self):
        if self.n < 2 or self.p < 1:
            raise ValidationError("need n >= 2 and p >= 1")
        if self.tau not in TAU_KINDS:
            raise ValidationError(f"tau must be one of {TAU_KINDS}")
        if self.tau == "rule" and self.p < 2:
            raise ValidationError("the two-feature rule needs p >= 2")
        if self.noise not in NOISE_KINDS:
            raise ValidationError(f"noise must be one of {NOISE_KINDS}")
        shares = (self.share_always, self.share_never, self.share_complier)
        if min(shares) < 0 or not math.isclose(sum(shares), 1.0, abs_tol=1e-9):
            raise ValidationError("compliance shares must be nonnegative and sum to 1")
        if self.share_complier < 0.2:
            raise ValidationError("complier share must be at least 0.2")
        probs = np.asarray(self.cluster_sizes, float)
        if probs.size == 0 or (probs < 0).any() or not math.isclose(probs.sum(), 1.0):
            raise ValidationError("cluster_sizes must be a probability vector over sizes 1..k")
        if not all(0 < r < 1 for r in self.z_rate):
            raise ValidationError("instrument rates must lie in (0, 1)")

    @property
    def n_strata(self) -> int:
        return len(self.z_rate)

    def replace(self, **kw) -> "DgpSpec":
        d = asdict(self)
        d.update(kw)
        return DgpSpec(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cluster_sizes"] = list(self.cluster_sizes)
        d["z_rate"] = list(self.z_rate)
        return d

    @classmethod
    def from_dict(cls, d) -> "DgpSpec":
        d = dict(d)
        for k in ("cluster_sizes", "z_rate"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def tau_function(spec: DgpSpec, X) -> np.ndarray:
    X = np.asarray(X, float)
    c = spec.tau_value
    if spec.tau == "constant":
        return np.full(X.shape[0], c)
    if spec.tau == "step":
        return c * (X[:, 0] > 0)
    return c * ((X[:, 0] > 0) & (X[:, 1] > 0))


def mu_function(spec: DgpSpec, X) -> np.ndarray:
    X = np.asarray(X, float)
    if X.shape[1] < 2:
        return np.zeros(X.shape[0])
    return spec.mu_coef * X[:, 1]


def population_late(spec: DgpSpec) -> float:
    """E[tau(X)]; types are independent of X so this is the complier mean too."""
    c = spec.tau_value
    return {"constant": c, "step": 0.5 * c, "rule": 0.25 * c}[spec.tau]


def covariates(rng, n, p) -> np.ndarray:
    """Odd columns standard normal (symmetric about 0), even columns Bernoulli(1/2)."""
    X = np.empty((n, p))
    for j in range(p):
        X[:, j] = rng.standard_normal(n) if j % 2 == 0 else rng.integers(0, 2, n)
    return X


@dataclass
class GroundTruth:
    tau: np.ndarray
    compliance_type: np.ndarray
    true_late: float
    true_itt: float
    sample_late: float
    sample_itt: float
    z_propensity: np.ndarray
    spec: DgpSpec
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"true_late": self.true_late, "true_itt": self.true_itt,
                "sample_late": self.sample_late, "sample_itt": self.sample_itt,
                "complier_share": float(np.mean(self.compliance_type == 2)),
                "spec": self.spec.to_dict(), **self.extra}


def schema_for(p: int, n_strata: int) -> Schema:
    return Schema(instrument="z", covariates=tuple(f"x{j + 1}" for j in range(p)), outcome="y",
                  treatment="d", cluster="household_id",
                  strata=("stratum",) if n_strata > 1 else (), unit_id="unit_id")


def generate_table(spec: DgpSpec) -> tuple[pd.DataFrame, GroundTruth]:
    rng = np.random.default_rng(spec.seed)
    n, p = spec.n, spec.p
    # households: sizes drawn until n people are covered, last one truncated
    sizes = []
    total = 0
    probs = np.asarray(spec.cluster_sizes, float)
    while total < n:
        s = int(rng.choice(probs.size, p=probs)) + 1
        s = min(s, n - total)
        sizes.append(s)
        total += s
    G = len(sizes)
    hh = np.repeat(np.arange(G), sizes)
    hh_stratum = rng.integers(0, spec.n_strata, G)
    # exact per-stratum instrument counts at household level
    hh_z = np.zeros(G)
    for s, rate in enumerate(spec.z_rate):
        members = np.flatnonzero(hh_stratum == s)
        k = int(round(rate * members.size))
        hh_z[rng.permutation(members)[:k]] = 1.0
    z = hh_z[hh]
    stratum = hh_stratum[hh]
    X = covariates(rng, n, p)
    ctype = rng.choice(3, n, p=[spec.share_always, spec.share_never, spec.share_complier])
    d = np.where(ctype == 0, 1.0, np.where(ctype == 1, 0.0, z))
    tau = tau_function(spec, X)
    if spec.noise == "gaussian":
        eps = spec.noise_scale * rng.standard_normal(n)
    else:
        eps = spec.noise_scale * rng.standard_t(4, n) / math.sqrt(2.0)
    y0 = mu_function(spec, X) + TYPE_SHIFT[ctype] + eps
    y = y0 + tau * d
    table = {"unit_id": np.arange(n), "household_id": hh, "stratum": stratum,
             "z": z, "d": d, "y": y}
    for j in range(p):
        table[f"x{j + 1}"] = X[:, j]
    df = pd.DataFrame(table)
    comp = ctype == 2
    late = population_late(spec)
    s_late = float(tau[comp].mean()) if comp.any() else math.nan
    truth = GroundTruth(
        tau=tau, compliance_type=ctype, true_late=late, true_itt=spec.share_complier * late,
        sample_late=s_late, sample_itt=float(np.mean(tau * comp)),
        z_propensity=np.asarray(spec.z_rate)[stratum], spec=spec,
        extra={"n_households": G})
    return df, truth


def generate(spec: DgpSpec) -> tuple[ObservationFrame, GroundTruth]:
    """Realise potential outcomes and return the observed frame with the truth."""
    df, truth = generate_table(spec)
    return build_frame(df, schema_for(spec.p, spec.n_strata)), truth


def write_dataset(spec: DgpSpec, path) -> tuple[Path, Path]:
    """CSV in the ingestion schema plus a ground-truth JSON sidecar and schema file."""
    path = Path(path)
    df, truth = generate_table(spec)
    df.to_csv(path, index=False)
    side = path.with_suffix(".truth.json")
    side.write_text(json.dumps(truth.to_dict(), indent=2))
    path.with_suffix(".schema.json").write_text(
        json.dumps(schema_for(spec.p, spec.n_strata).to_dict(), indent=2))
    return path, side


ORACLE_MAX_N = 500
ORACLE_MAX_P = 4


def _split_masks(X):
    """Row masks ``X[:, j] <= t`` for every feature and midpoint cut."""
    masks = []
    for j in range(X.shape[1]):
        u = np.unique(X[:, j])
        for t in 0.5 * (u[:-1] + u[1:]):
            masks.append(X[:, j] <= t)
    return np.array(masks, bool).reshape(-1, X.shape[0])


def brute_force_policy_oracle(X, rewards, depth: int = 2) -> float:
    """Best objective over all trees of depth <= ``depth`` by full enumeration.

    Every (root split, child split, leaf actions) combination is scored; the
    sums come from one matrix product over split masks, so comparisons are
    exact whenever partial sums are representable (e.g. dyadic rewards).
    The winning assignment is re-summed with ``math.fsum``.
    """
    X = np.asarray(X, float)
    if X.ndim == 1:
        X = X[:, None]
    r = np.asarray(rewards, float)
    n, p = X.shape
    if n > ORACLE_MAX_N or p > ORACLE_MAX_P or depth > 2 or depth < 0:
        raise ValidationError(f"oracle limited to n <= {ORACLE_MAX_N}, p <= {ORACLE_MAX_P}, "
                              "depth <= 2")
    total = r.sum()
    best_val, best_mask = 0.0, np.zeros(n, bool)
    if total > best_val:
        best_val, best_mask = total, np.ones(n, bool)
    if depth == 0 or n < 2:
        return math.fsum(r[best_mask])
    S = _split_masks(X)
    if S.shape[0] == 0:
        return math.fsum(r[best_mask])
    Sf = S.astype(float)
    left = Sf @ r
    right = total - left
    for vals, masks in ((left, S), (right, ~S)):
        k = int(np.argmax(vals))
        if vals[k] > best_val:
            best_val, best_mask = vals[k], masks[k]
    if depth == 1:
        return math.fsum(r[best_mask])
    # A[k, c] = sum of r over rows left of root split k and left of child split c
    A = (Sf * r) @ Sf.T
    B = left[None, :] - A          # right of root k, left of child c
    # per root split, the best rule within each side: nothing, all, or one
    # of the two halves of a child split
    def side_best(tot, within):
        opts = np.stack([np.zeros_like(tot), tot, within.max(axis=1),
                         (tot[:, None] - within).max(axis=1)])
        return opts.max(axis=0)

    value = side_best(left, A) + side_best(right, B)
    k = int(np.argmax(value))
    if value[k] > best_val:
        best_mask = np.zeros(n, bool)
        for side, tot, within in ((S[k], left[k], A[k]), (~S[k], right[k], B[k])):
            opts = [(0.0, np.zeros(n, bool)), (tot, side)]
            c = int(np.argmax(within))
            opts.append((within[c], side & S[c]))
            c = int(np.argmax(tot - within))
            opts.append(((tot - within)[c], side & ~S[c]))
            best_mask |= max(opts, key=lambda o: o[0])[1]
    return math.fsum(r[best_mask])
