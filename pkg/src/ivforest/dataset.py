"""Tabular data model: CSV ingestion, complete-case filtering, subgroups."""
from __future__ import annotations

import hashlib
import json
import operator
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import DataError, ValidationError

MISSING_TOKENS = ("", "NA")
STRATUM_PREFIX = "stratum:"


@dataclass(frozen=True)
class Schema:
    """Maps analysis roles to CSV column names."""

    instrument: str
    covariates: tuple[str, ...]
    outcome: str | tuple[str, ...] | None = None
    treatment: str | None = None
    cluster: str | None = None
    strata: tuple[str, ...] = ()
    unit_id: str | None = None
    weights: str | None = None

    @classmethod
    def from_dict(cls, d: Mapping) -> "Schema":
        known = {"instrument", "covariates", "outcome", "treatment", "cluster",
                 "strata", "unit_id", "weights"}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown schema keys: {sorted(unknown)}")
        if "instrument" not in d or "covariates" not in d:
            raise ValidationError("schema needs at least 'instrument' and 'covariates'")
        outcome = d.get("outcome")
        if isinstance(outcome, (list, tuple)):
            outcome = tuple(outcome)
        return cls(
            instrument=d["instrument"],
            covariates=tuple(d["covariates"]),
            outcome=outcome,
            treatment=d.get("treatment"),
            cluster=d.get("cluster"),
            strata=tuple(d.get("strata") or ()),
            unit_id=d.get("unit_id"),
            weights=d.get("weights"),
        )

    @classmethod
    def from_json(cls, path) -> "Schema":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def outcomes(self) -> tuple[str, ...]:
        if self.outcome is None:
            return ()
        if isinstance(self.outcome, str):
            return (self.outcome,)
        return tuple(self.outcome)

    def to_dict(self) -> dict:
        return {
            "instrument": self.instrument, "covariates": list(self.covariates),
            "outcome": list(self.outcomes) if len(self.outcomes) != 1 else self.outcomes[0],
            "treatment": self.treatment, "cluster": self.cluster,
            "strata": list(self.strata), "unit_id": self.unit_id, "weights": self.weights,
        }


def _frozen(a):
    if a is None:
        return None
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ObservationFrame:
    """Analysis dataset. Arrays are read-only; row order follows the input."""

    unit_id: np.ndarray
    cluster_id: np.ndarray
    y: np.ndarray | None
    d: np.ndarray | None
    z: np.ndarray
    X: np.ndarray
    covariate_names: tuple[str, ...]
    is_stratum: np.ndarray
    strata: np.ndarray | None = None
    weights: np.ndarray | None = None
    outcome_name: str | None = None
    drop_report: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.z.shape[0]
        if self.weights is None:
            object.__setattr__(self, "weights", np.ones(n))
        for name in ("unit_id", "cluster_id", "y", "d", "z", "X", "is_stratum",
                     "strata", "weights"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if len(set(self.covariate_names)) != len(self.covariate_names):
            raise DataError("covariate names must be unique")
        if self.X.shape != (n, len(self.covariate_names)):
            raise DataError("X shape does not match covariate names")
        for name in ("d", "z"):
            v = getattr(self, name)
            if v is not None and not np.isin(v, (0.0, 1.0)).all():
                raise DataError(f"{name} must be binary 0/1")

    @property
    def n(self) -> int:
        return int(self.z.shape[0])

    @property
    def p(self) -> int:
        return int(self.X.shape[1])

    @property
    def n_clusters(self) -> int:
        return int(self.cluster_id.max()) + 1 if self.n else 0

    def column(self, name: str) -> np.ndarray:
        try:
            return self.X[:, self.covariate_names.index(name)]
        except ValueError:
            raise ValidationError(f"unknown column {name!r}") from None

    def with_outcome(self, y, name=None) -> "ObservationFrame":
        return replace(self, y=np.asarray(y, float), outcome_name=name)

    def subset(self, mask) -> "ObservationFrame":
        mask = np.asarray(mask)
        codes, cl = np.unique(self.cluster_id[mask], return_inverse=True)
        return replace(
            self,
            unit_id=self.unit_id[mask], cluster_id=cl,
            y=None if self.y is None else self.y[mask],
            d=None if self.d is None else self.d[mask],
            z=self.z[mask], X=self.X[mask],
            strata=None if self.strata is None else self.strata[mask],
            weights=self.weights[mask],
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.X, self.z, self.d, self.y, self.cluster_id, self.weights):
            if a is not None:
                h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        h.update("\x1f".join(self.covariate_names).encode())
        return h.hexdigest()[:16]

    def covariate_frame(self, include_strata=True) -> pd.DataFrame:
        cols = [i for i, s in enumerate(self.is_stratum) if include_strata or not s]
        return pd.DataFrame(self.X[:, cols], columns=[self.covariate_names[i] for i in cols])


def read_table(path) -> pd.DataFrame:
    """Read a CSV as strings; only '' and 'NA' count as missing."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    return pd.read_csv(path, dtype=str, keep_default_na=False,
                       na_values=list(MISSING_TOKENS), encoding="utf-8")


def _numeric(df: pd.DataFrame, col: str) -> pd.Series:
    raw = df[col]
    if raw.dtype.kind in "fiub":
        return raw.astype(float)
    try:
        # exact decimal parsing; pandas' fast parser can be off by an ulp
        return raw.astype(float)
    except ValueError:
        pass
    out = pd.to_numeric(raw, errors="coerce")
    bad = out.isna() & raw.notna()
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(f"unparseable numeric cell in column {col!r} at row {row}: {raw.iloc[row]!r}")
    return out.astype(float)


def build_frame(df: pd.DataFrame, schema: Schema, outcome: str | None = None) -> ObservationFrame:
    """Apply the schema to a raw table and drop incomplete rows.

    ``outcome`` picks one of the schema outcomes (default: the first);
    completeness is judged pairwise for that outcome only.
    """
    if outcome is None and schema.outcomes:
        outcome = schema.outcomes[0]
    needed = [schema.instrument, *schema.covariates, *schema.strata]
    optional = [c for c in (outcome, schema.treatment, schema.cluster, schema.unit_id,
                            schema.weights) if c]
    missing = [c for c in needed + optional if c not in df.columns]
    if missing:
        raise DataError(f"missing required column(s): {missing}")
    if len(set(schema.covariates)) != len(schema.covariates):
        raise DataError("duplicate covariate names in schema")

    numeric_cols = [c for c in [outcome, schema.treatment, schema.instrument, *schema.covariates,
                                schema.weights] if c]
    values = {c: _numeric(df, c) for c in dict.fromkeys(numeric_cols)}
    check = list(dict.fromkeys(numeric_cols + list(schema.strata)
                               + [c for c in (schema.cluster, schema.unit_id) if c]))
    na = pd.DataFrame({c: (values[c].isna() if c in values else df[c].isna()) for c in check})
    keep = ~na.any(axis=1).to_numpy()
    report = {
        "rows_in": int(len(df)),
        "rows_kept": int(keep.sum()),
        "drop_reasons": {c: int(na[c].sum()) for c in check if na[c].any()},
    }

    def col(c):
        return values[c].to_numpy()[keep]

    for c in (schema.treatment, schema.instrument):
        if c and not np.isin(col(c), (0.0, 1.0)).all():
            raise DataError(f"column {c!r} must be binary 0/1")
    n = int(keep.sum())
    X = np.column_stack([col(c) for c in schema.covariates]) if schema.covariates else np.empty((n, 0))
    names = list(schema.covariates)
    is_stratum = [False] * len(names)
    strata = None
    if schema.strata:
        codes = []
        for c in schema.strata:
            levels, code = np.unique(df[c][keep].to_numpy(), return_inverse=True)
            codes.append(code)
            # drop-first dummies; the first level is the reference
            for lv_i, lv in enumerate(levels[1:], start=1):
                X = np.column_stack([X, (code == lv_i).astype(float)])
                names.append(f"{STRATUM_PREFIX}{c}={lv}")
                is_stratum.append(True)
        strata = np.column_stack(codes)
    if schema.cluster:
        _, cluster = np.unique(df[schema.cluster][keep].to_numpy(), return_inverse=True)
    else:
        cluster = np.arange(n)
    unit = df[schema.unit_id][keep].to_numpy() if schema.unit_id else np.flatnonzero(keep)
    weights = col(schema.weights) if schema.weights else np.ones(n)
    if (weights < 0).any():
        raise DataError("weights must be nonnegative")
    return ObservationFrame(
        unit_id=unit, cluster_id=cluster.astype(np.int64),
        y=col(outcome) if outcome else None,
        d=col(schema.treatment) if schema.treatment else None,
        z=col(schema.instrument), X=X, covariate_names=tuple(names),
        is_stratum=np.array(is_stratum, bool), strata=strata, weights=weights,
        outcome_name=outcome, drop_report=report,
    )


def load_csv(path, schema: Schema | Mapping, outcome: str | None = None) -> ObservationFrame:
    if not isinstance(schema, Schema):
        schema = Schema.from_dict(schema)
    return build_frame(read_table(path), schema, outcome)


def frame_to_table(frame: ObservationFrame) -> pd.DataFrame:
    """Inverse of build_frame for frames without strata dummies collapsed."""
    out = {"unit_id": frame.unit_id, "cluster_id": frame.cluster_id}
    if frame.y is not None:
        out[frame.outcome_name or "y"] = frame.y
    if frame.d is not None:
        out["d"] = frame.d
    out["z"] = frame.z
    for j, name in enumerate(frame.covariate_names):
        if not frame.is_stratum[j]:
            out[name] = frame.X[:, j]
    if frame.strata is not None:
        for k in range(frame.strata.shape[1]):
            out[f"stratum{k}"] = frame.strata[:, k]
    return pd.DataFrame(out)


VISIT_TYPES = ("emergent_nonpreventable", "emergent_preventable",
               "primary_care_treatable", "nonemergent")


def derive_binary_visit_types(type_sums, n_visits) -> np.ndarray:
    """Binary any-visit-of-type indicators from summed visit-type probabilities.

    One visit marks the most likely type, two or three visits mark the top
    two or three, four or more mark every type with positive mass. Types
    with zero mass are never marked; ties go to the lower category index.
    """
    S = np.asarray(type_sums, float)
    nv = np.asarray(n_visits, float)
    if S.ndim == 1:
        S = S[None, :]
        nv = np.atleast_1d(nv)
    if S.shape[1] != 4 or S.shape[0] != nv.shape[0]:
        raise DataError("type_sums must be (n, 4) with one visit count per row")
    if np.isnan(S).any() or np.isnan(nv).any():
        raise DataError("visit-type inputs contain missing values")
    if (S < 0).any() or (nv < 0).any():
        raise DataError("negative visit counts")
    k = np.where(nv >= 4, 4, nv).astype(int)
    rank = np.argsort(np.argsort(-S, axis=1, kind="stable"), axis=1, kind="stable")
    out = (rank < k[:, None]) & (S > 0)
    return out.astype(np.int8)


_OPS = {
    "==": operator.eq, "!=": operator.ne, ">=": operator.ge,
    "<=": operator.le, ">": operator.gt, "<": operator.lt,
}
_NEGATE = {"==": "!=", "!=": "==", ">=": "<", "<": ">=", "<=": ">", ">": "<="}
_SPEC_RE = re.compile(r"^\s*(?P<col>.+?)\s*(?P<op>==|!=|>=|<=|>|<)\s*(?P<thr>[-+0-9.eE]+)\s*$")


@dataclass(frozen=True)
class SubgroupSpec:
    name: str
    column: str
    op: str
    threshold: float

    def __post_init__(self):
        if self.op not in _OPS:
            raise ValidationError(f"unsupported subgroup operator {self.op!r}")

    @classmethod
    def parse(cls, text: str, name: str | None = None) -> "SubgroupSpec":
        """Parse ``'age >= 50'`` style predicates."""
        m = _SPEC_RE.match(text)
        if not m:
            raise ValidationError(f"cannot parse subgroup predicate {text!r}")
        return cls(name or text.strip(), m["col"], m["op"], float(m["thr"]))

    def negate(self) -> "SubgroupSpec":
        return SubgroupSpec(f"not ({self.name})", self.column, _NEGATE[self.op], self.threshold)

    def evaluate(self, values) -> np.ndarray:
        return _OPS[self.op](np.asarray(values, float), self.threshold)


def subgroup_mask(frame: ObservationFrame, spec: SubgroupSpec) -> np.ndarray:
    return spec.evaluate(frame.column(spec.column))


def subgroup_masks(frame: ObservationFrame, specs: Sequence[SubgroupSpec]) -> dict[str, np.ndarray]:
    return {s.name: subgroup_mask(frame, s) for s in specs}
