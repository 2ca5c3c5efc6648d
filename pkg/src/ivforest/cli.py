"""Command-line interface: ``ivforest <subcommand> ...``.

Configuration precedence, lowest to highest: built-in defaults, the scale
profile (desk or paper), the JSON config file, command-line flags.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from ._accel import set_threads
from .aggregate import (average_effect, gate, histogram_bins, profile_by_effect_sign,
                        itt_scores_from_model, quantile_table, scores_from_model)
from .baseline import fit_2sls_frame
from .dataset import (STRATUM_PREFIX, Schema, SubgroupSpec, build_frame, read_table,
                      subgroup_mask)
from .errors import DataError, IvForestError, NumericalError, ValidationError
from .forest import TreeParams, variable_importance
from .ivforest import IvForestModel, NuisanceParams, fit_iv_forest, predict_ite
from .policy import allocate_capacity, learn_policy_tree, profile_allocation, rewards_from_scores
from .synth import DgpSpec, write_dataset

PROFILES = {"desk": 2_000, "paper": 100_000}
EXIT_OK, EXIT_VALIDATION, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
FAILED_MARKER = "FAILED"
MANIFEST = "manifest.json"


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ValidationError):
        return EXIT_VALIDATION
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    return 1


def _load_json(path_or_obj):
    if isinstance(path_or_obj, (str, Path)):
        try:
            return json.loads(Path(path_or_obj).read_text())
        except FileNotFoundError:
            raise DataError(f"file not found: {path_or_obj}") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path_or_obj} is not valid JSON: {exc}") from None
    return path_or_obj


@dataclass
class PolicyConfig:
    objective: str | None = None
    direction: str = "minimize"
    allowed_features: tuple[str, ...] = ()
    depth: int = 2
    K: int | None = None

    @classmethod
    def from_dict(cls, d) -> "PolicyConfig":
        d = dict(d)
        if "allowed_features" in d:
            d["allowed_features"] = tuple(d["allowed_features"])
        return cls(**d)


@dataclass
class RunConfig:
    input: str
    schema: dict
    estimand: str = "late"
    forest: dict = field(default_factory=dict)
    inference: dict = field(default_factory=dict)
    outcomes: tuple[str, ...] = ()
    subgroups: tuple[str, ...] = ()
    policy: PolicyConfig | None = None
    output_dir: str = "ivforest_out"
    seed: int = 0
    center: bool = True
    scale: str = "desk"
    threads: int | None = None

    @classmethod
    def from_dict(cls, d, base_dir=None) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        if "input" not in d or "schema" not in d:
            raise ValidationError("config needs 'input' and 'schema'")
        base = Path(base_dir) if base_dir else Path(".")
        if isinstance(d["schema"], str):
            d["schema"] = _load_json(base / d["schema"])
        d["input"] = str(base / d["input"])
        for k in ("outcomes", "subgroups"):
            if k in d:
                d[k] = tuple(d[k])
        if d.get("policy") is not None:
            d["policy"] = PolicyConfig.from_dict(d["policy"])
        cfg = cls(**d)
        cfg.check()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_dict(_load_json(path), Path(path).parent)

    def check(self) -> None:
        if self.estimand not in ("late", "itt"):
            raise ValidationError(f"estimand must be 'late' or 'itt', got {self.estimand!r}")
        if self.scale not in PROFILES:
            raise ValidationError(f"scale must be one of {sorted(PROFILES)}")
        Schema.from_dict(self.schema)
        for s in self.subgroups:
            SubgroupSpec.parse(s)

    def schema_obj(self) -> Schema:
        s = Schema.from_dict(self.schema)
        if self.estimand == "itt" and s.treatment:
            # ITT never looks at take-up
            s = Schema.from_dict({**s.to_dict(), "treatment": None})
        return s

    def tree_params(self) -> TreeParams:
        kw = {"n_trees": PROFILES[self.scale], "seed": self.seed}
        kw.update(self.forest)
        try:
            return TreeParams(**kw)
        except TypeError as exc:
            raise ValidationError(f"bad forest settings: {exc}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["outcomes"] = list(self.outcomes)
        d["subgroups"] = list(self.subgroups)
        return d


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o)}")


@contextlib.contextmanager
def _stage(name: str, out_dir: Path):
    try:
        yield
    except Exception as exc:
        (out_dir / FAILED_MARKER).write_text(f"stage {name}: {type(exc).__name__}: {exc}\n")
        if isinstance(exc, IvForestError):
            raise type(exc)(f"[{name}] {exc}") from exc
        raise


def _gate_rows(scores, frame, specs, level):
    rows = [average_effect(scores, level).to_dict()]
    for spec in specs:
        for s in (spec, spec.negate()):
            rows.append(gate(scores, subgroup_mask(frame, s), s.name, level).to_dict())
    return pd.DataFrame(rows)


def _varimp_frame(model: IvForestModel, frame) -> pd.DataFrame:
    imp = variable_importance(model.forest, exclude=frame.is_stratum)
    out = pd.DataFrame({"variable": frame.covariate_names, "importance": imp,
                        "is_stratum": frame.is_stratum})
    return out.sort_values("importance", ascending=False, kind="stable").reset_index(drop=True)


def _late_summary(model, frame, scores, level, with_2sls=True) -> dict:
    ae = average_effect(scores, level)
    out = {"estimand": model.estimand, "forest": ae.to_dict(),
           "wald": {"estimate": model.wald_tau, "se": model.wald_se},
           "flags": {k: v for k, v in scores.flags.items()}}
    if with_2sls and model.estimand == "late":
        out["2sls"] = fit_2sls_frame(frame).summary()
    return out


def run_pipeline(cfg: RunConfig) -> dict:
    """Run every stage and write a manifest of output files with content hashes."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / FAILED_MARKER).unlink(missing_ok=True)
    (out / MANIFEST).unlink(missing_ok=True)
    if cfg.threads:
        set_threads(cfg.threads)
    level = float(cfg.inference.get("level", 0.95))
    with_var = bool(cfg.inference.get("variance", True))
    mode = cfg.inference.get("compliance_mode", "local")
    trim = float(cfg.inference.get("trim", 0.005))
    nuisance = NuisanceParams(**cfg.inference.get("nuisance", {}))

    with _stage("ingest", out):
        schema = cfg.schema_obj()
        df = read_table(cfg.input)
        outcomes = cfg.outcomes or schema.outcomes
        if not outcomes:
            raise ValidationError("no outcomes configured")
        missing = [o for o in outcomes if o not in df.columns]
        if missing:
            raise DataError(f"outcome column(s) not in input: {missing}")
        specs = [SubgroupSpec.parse(s) for s in cfg.subgroups]
        frames = {o: build_frame(df, schema, o) for o in outcomes}
        for spec in specs:
            for fr in frames.values():
                fr.column(spec.column)
        _write_json(out / "ingest.json", {
            o: {"n": fr.n, "p": fr.p, "n_clusters": fr.n_clusters, "fingerprint": fr.fingerprint(),
                **fr.drop_report} for o, fr in frames.items()})

    params = cfg.tree_params()
    late_rows, gate_tables, taus = [], [], {}
    models, scores_by = {}, {}
    for o, frame in frames.items():
        od = out / o
        od.mkdir(exist_ok=True)
        with _stage(f"fit:{o}", out):
            model = fit_iv_forest(frame, params, center=cfg.center, estimand=cfg.estimand,
                                  nuisance=nuisance)
            model.flags.update(schema=schema.to_dict(), outcome=o, fingerprint=frame.fingerprint())
            model.save(od / "model.npz")
        with _stage(f"ite:{o}", out):
            est = predict_ite(model, level=level, variance=with_var)
            est.to_csv(od / "ite.csv", frame.unit_id)
            taus[o] = est.tau_hat
        with _stage(f"late:{o}", out):
            scores = scores_from_model(model, frame, mode=mode)
            summary = _late_summary(model, frame, scores, level)
            _write_json(od / "late.json", summary)
            row = {"outcome": o, "forest_estimate": summary["forest"]["estimate"],
                   "forest_se": summary["forest"]["se"],
                   "share_sig10_pos": float(np.mean(est.sig10 & (est.tau_hat > 0))),
                   "share_sig10_neg": float(np.mean(est.sig10 & (est.tau_hat < 0)))}
            if "2sls" in summary:
                row.update(tsls_estimate=summary["2sls"]["estimate"],
                           tsls_se=summary["2sls"]["se"])
            late_rows.append(row)
        with _stage(f"gate:{o}", out):
            g = _gate_rows(scores, frame, specs, level)
            g.to_csv(od / "gates.csv", index=False)
            gate_tables.append(g.assign(outcome=o))
        with _stage(f"varimp:{o}", out):
            _varimp_frame(model, frame).to_csv(od / "varimp.csv", index=False)
        with _stage(f"profile:{o}", out):
            keep = ~frame.is_stratum
            names = [n for n, k in zip(frame.covariate_names, keep) if k]
            profile_by_effect_sign(frame.X[:, keep], names, est.tau_hat, frame.cluster_id
                                   ).to_csv(od / "profile.csv", index=False)
            if with_var:
                profile_by_effect_sign(frame.X[:, keep], names, est.tau_hat, frame.cluster_id,
                                       significant=est.sig10
                                       ).to_csv(od / "profile_sig10.csv", index=False)
        with _stage(f"hist:{o}", out):
            sig = est.sig10 if with_var else None
            _write_json(od / "hist.json", histogram_bins(est.tau_hat, trim, sig).to_dict())
        models[o], scores_by[o] = model, scores

    with _stage("tables", out):
        quantile_table(taus).to_csv(out / "quantiles.csv", index=False)
        pd.DataFrame(late_rows).to_csv(out / "late_table.csv", index=False)
        pd.concat(gate_tables, ignore_index=True).to_csv(out / "gate_table.csv", index=False)

    if cfg.policy is not None and cfg.policy.objective is not None:
        pol = cfg.policy
        with _stage("policy", out):
            if pol.objective not in scores_by:
                raise ValidationError(f"policy objective {pol.objective!r} is not a fitted outcome")
            frame = frames[pol.objective]
            rewards = rewards_from_scores(itt_scores_from_model(models[pol.objective], frame),
                                          pol.direction)
            allowed = list(pol.allowed_features) or [
                n for n, s in zip(frame.covariate_names, frame.is_stratum) if not s]
            for a in allowed:
                frame.column(a)
            tree = learn_policy_tree(frame.X, rewards, frame.covariate_names, allowed, pol.depth)
            tree.to_json(out / "policy_tree.json")
            (out / "policy_tree.txt").write_text(tree.render() + "\n")
            if pol.K is not None:
                alloc = allocate_capacity(rewards, pol.K, frame.unit_id)
                sel = alloc.mask(frame.n)
                pd.DataFrame({"unit_id": frame.unit_id, "selected": sel.astype(int),
                              "reward": rewards}).to_csv(out / "allocation.csv", index=False)
                _write_json(out / "allocation.json", alloc.summary())
                if (~sel).any():
                    keep = ~frame.is_stratum
                    names = [n for n, k in zip(frame.covariate_names, keep) if k]
                    profile_allocation(frame.X[:, keep], names, sel, ~sel, frame.cluster_id
                                       ).to_csv(out / "allocation_profile.csv", index=False)

    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != MANIFEST)
    manifest = {"version": __version__, "config": cfg.to_dict(),
                "files": {str(p.relative_to(out)): sha256_file(p) for p in files}}
    _write_json(out / MANIFEST, manifest)
    return manifest


# ---------------------------------------------------------------- subcommands


def _schema_from(args, model=None) -> Schema:
    if getattr(args, "schema", None):
        return Schema.from_dict(_load_json(args.schema))
    if model is not None and "schema" in model.flags:
        return Schema.from_dict(model.flags["schema"])
    raise ValidationError("--schema is required")


def _frame_from(args, model=None):
    schema = _schema_from(args, model)
    outcome = getattr(args, "outcome", None)
    if outcome is None and model is not None:
        outcome = model.flags.get("outcome")
    if model is not None and model.estimand == "itt" and schema.treatment:
        schema = Schema.from_dict({**schema.to_dict(), "treatment": None})
    return build_frame(read_table(args.input), schema, outcome)


def _load_model(path) -> IvForestModel:
    if not Path(path).exists():
        raise DataError(f"model file not found: {path}")
    return IvForestModel.load(path)


def _matched_frame(args, model):
    """Training frame for commands that use the model's out-of-bag outputs."""
    frame = _frame_from(args, model)
    if frame.fingerprint() != model.forest.fingerprint:
        raise ValidationError(
            f"incompatible model/data fingerprint: model {model.forest.fingerprint}, "
            f"data {frame.fingerprint()}")
    return frame


def _emit(df_or_obj, out):
    if isinstance(df_or_obj, pd.DataFrame):
        if out:
            df_or_obj.to_csv(out, index=False)
        else:
            sys.stdout.write(df_or_obj.to_csv(index=False))
    else:
        text = json.dumps(df_or_obj, indent=2, sort_keys=True, default=_json_default)
        if out:
            Path(out).write_text(text + "\n")
        else:
            print(text)


def cmd_ingest(args):
    frame = _frame_from(args)
    _emit({"n": frame.n, "p": frame.p, "n_clusters": frame.n_clusters,
           "covariates": list(frame.covariate_names), "fingerprint": frame.fingerprint(),
           **frame.drop_report}, args.out)


def _params_from_args(args, base: dict) -> TreeParams:
    kw = dict(base)
    if args.paper_scale:
        kw["n_trees"] = PROFILES["paper"]
    for name in ("n_trees", "seed", "min_node_size", "mtry", "bag_size",
                 "subsample_fraction", "honesty_fraction"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    kw.setdefault("n_trees", PROFILES["desk"])
    try:
        return TreeParams(**kw)
    except TypeError as exc:
        raise ValidationError(f"bad forest settings: {exc}") from None


def cmd_fit(args):
    cfg = _load_json(args.config) if args.config else {}
    schema = _schema_from(args)
    estimand = args.estimand or cfg.get("estimand", "late")
    if estimand == "itt" and schema.treatment:
        schema = Schema.from_dict({**schema.to_dict(), "treatment": None})
    frame = build_frame(read_table(args.input), schema, args.outcome)
    params = _params_from_args(args, cfg.get("forest", {}))
    center = cfg.get("center", True) if args.center is None else args.center
    model = fit_iv_forest(frame, params, center=center, estimand=estimand)
    model.flags.update(schema=schema.to_dict(), outcome=frame.outcome_name,
                       fingerprint=frame.fingerprint())
    model.save(args.model)
    _emit({"model": str(args.model), "n": frame.n, "n_trees": params.n_trees,
           "estimand": estimand, "fingerprint": frame.fingerprint(),
           "n_fallback": model.flags["n_fallback"]}, None)


def cmd_predict(args):
    model = _load_model(args.model)
    if args.input is None:
        est = predict_ite(model, level=args.level, variance=not args.no_variance)
        uid = None
    else:
        frame = _frame_from(args, model)
        if frame.fingerprint() == model.forest.fingerprint:
            est = predict_ite(model, level=args.level, variance=not args.no_variance)
        else:
            if tuple(frame.covariate_names) != tuple(model.forest.covariate_names):
                raise ValidationError("covariates do not match the model's")
            est = predict_ite(model, frame.X, level=args.level, variance=not args.no_variance)
        uid = frame.unit_id
    _emit(est.to_frame(uid), args.out)


def cmd_late(args):
    model = _load_model(args.model)
    frame = _matched_frame(args, model)
    scores = scores_from_model(model, frame, mode=args.compliance_mode)
    _emit(_late_summary(model, frame, scores, args.level, with_2sls=not args.no_2sls), args.out)


def cmd_gate(args):
    model = _load_model(args.model)
    frame = _matched_frame(args, model)
    scores = scores_from_model(model, frame, mode=args.compliance_mode)
    specs = [SubgroupSpec.parse(s) for s in args.subgroup]
    _emit(_gate_rows(scores, frame, specs, args.level), args.out)


def cmd_quantiles(args):
    taus = {}
    for path in args.model:
        m = _load_model(path)
        est = predict_ite(m, variance=False)
        taus[m.flags.get("outcome") or Path(path).stem] = est.tau_hat
    _emit(quantile_table(taus), args.out)


def cmd_varimp(args):
    model = _load_model(args.model)
    f = model.forest
    strata = np.array([n.startswith(STRATUM_PREFIX) for n in f.covariate_names])
    imp = variable_importance(f, max_depth=args.max_depth, decay=args.decay, exclude=strata)
    df = pd.DataFrame({"variable": f.covariate_names, "importance": imp})
    _emit(df.sort_values("importance", ascending=False, kind="stable"), args.out)


def cmd_profile(args):
    model = _load_model(args.model)
    frame = _matched_frame(args, model)
    est = predict_ite(model, level=args.level, variance=args.significant)
    keep = ~frame.is_stratum
    names = [n for n, k in zip(frame.covariate_names, keep) if k]
    sig = est.sig10 if args.significant else None
    _emit(profile_by_effect_sign(frame.X[:, keep], names, est.tau_hat, frame.cluster_id, sig),
          args.out)


def cmd_hist(args):
    model = _load_model(args.model)
    est = predict_ite(model, variance=args.significant)
    _emit(histogram_bins(est.tau_hat, args.trim, est.sig10 if args.significant else None
                         ).to_dict(), args.out)


def _rewards(args):
    model = _load_model(args.model)
    frame = _matched_frame(args, model)
    scores = itt_scores_from_model(model, frame)
    return frame, rewards_from_scores(scores, args.direction)


def cmd_policy_tree(args):
    if args.depth > 2:
        raise ValidationError("exact tree search cost grows exponentially with depth; "
                              "depth > 2 is not supported")
    frame, rewards = _rewards(args)
    allowed = [a.strip() for a in args.allowed.split(",")] if args.allowed else [
        n for n, s in zip(frame.covariate_names, frame.is_stratum) if not s]
    for a in allowed:
        frame.column(a)
    tree = learn_policy_tree(frame.X, rewards, frame.covariate_names, allowed, args.depth)
    if args.text:
        print(tree.render())
    _emit(tree.to_dict(), args.out)


def cmd_allocate(args):
    if args.rewards:
        df = read_table(args.rewards)
        if args.column not in df.columns:
            raise DataError(f"column {args.column!r} not in {args.rewards}")
        r = pd.to_numeric(df[args.column], errors="coerce").to_numpy(float)
        if np.isnan(r).any():
            raise DataError(f"column {args.column!r} has missing or non-numeric values")
        if args.direction == "minimize":
            r = -r
        uid = df["unit_id"].to_numpy() if "unit_id" in df.columns else np.arange(r.size)
    else:
        if not (args.model and args.input):
            raise ValidationError("allocate needs --rewards or --model with --input")
        frame, r = _rewards(args)
        uid = frame.unit_id
    res = allocate_capacity(r, args.k, uid)
    sel = res.mask(r.size)
    if args.summary:
        print(json.dumps(res.summary(), sort_keys=True))
    _emit(pd.DataFrame({"unit_id": uid, "selected": sel.astype(int), "reward": r}), args.out)


def cmd_simulate(args):
    never = args.never_share
    if never is None:
        never = 1.0 - args.always_share - args.complier_share
    spec = DgpSpec(n=args.n, p=args.p, tau=args.tau, tau_value=args.tau_value,
                   share_always=args.always_share, share_never=never,
                   share_complier=args.complier_share, noise=args.noise,
                   noise_scale=args.noise_scale, z_rate=tuple(args.z_rate), seed=args.seed)
    csv, side = write_dataset(spec, args.out)
    _emit({"data": str(csv), "truth": str(side),
           "schema": str(Path(csv).with_suffix(".schema.json"))}, None)


def cmd_run(args):
    cfg = RunConfig.from_file(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if args.seed is not None:
        cfg.seed = args.seed
    if args.paper_scale:
        cfg.scale = "paper"
        cfg.forest.pop("n_trees", None)
    if args.n_trees is not None:
        cfg.forest["n_trees"] = args.n_trees
    if args.threads:
        cfg.threads = args.threads
    manifest = run_pipeline(cfg)
    print(json.dumps({"output_dir": cfg.output_dir, "n_files": len(manifest["files"])}))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, help="cap on worker threads")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--input", help="CSV file")
    data.add_argument("--schema", help="JSON schema mapping roles to columns")
    data.add_argument("--outcome", help="outcome column (default: first in schema)")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--model", required=True, help="model file written by fit")
    model.add_argument("--level", type=float, default=0.95)

    out = argparse.ArgumentParser(add_help=False)
    out.add_argument("--out", help="output file (default: stdout)")

    comp = argparse.ArgumentParser(add_help=False)
    comp.add_argument("--compliance-mode", choices=("local", "mean"), default="local")

    p = argparse.ArgumentParser(prog="ivforest", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("ingest", parents=[common, data, out], help="validate and summarise input")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("fit", parents=[common, data], help="grow an IV forest and save it")
    s.add_argument("--model", required=True, help="output model file (.npz)")
    s.add_argument("--config", help="JSON config with forest/estimand/center fields")
    s.add_argument("--estimand", choices=("late", "itt"))
    s.add_argument("--trees", dest="n_trees", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--min-node-size", type=int)
    s.add_argument("--mtry", type=int)
    s.add_argument("--bag-size", type=int)
    s.add_argument("--subsample-fraction", type=float)
    s.add_argument("--honesty-fraction", type=float)
    s.add_argument("--paper-scale", action="store_true", help="100,000 trees")
    s.add_argument("--no-center", dest="center", action="store_false", default=None)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("predict", parents=[common, data, model, out], help="effect estimates")
    s.add_argument("--no-variance", action="store_true")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("late", parents=[common, data, model, out, comp],
                       help="doubly robust average effect with 2SLS for comparison")
    s.add_argument("--no-2sls", action="store_true")
    s.set_defaults(func=cmd_late)

    s = sub.add_parser("gate", parents=[common, data, model, out, comp], help="subgroup effects")
    s.add_argument("--subgroup", action="append", default=[],
                   help="e.g. 'age >= 50'; the complement is reported too")
    s.set_defaults(func=cmd_gate)

    s = sub.add_parser("quantiles", parents=[common, out], help="quantiles of effect estimates")
    s.add_argument("--model", action="append", required=True)
    s.set_defaults(func=cmd_quantiles)

    s = sub.add_parser("varimp", parents=[common, out], help="split-frequency importance")
    s.add_argument("--model", required=True)
    s.add_argument("--max-depth", type=int, default=4)
    s.add_argument("--decay", type=float, default=2.0)
    s.set_defaults(func=cmd_varimp)

    s = sub.add_parser("profile", parents=[common, data, model, out],
                       help="covariate means by sign of the effect")
    s.add_argument("--significant", action="store_true", help="only units significant at 10%%")
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("hist", parents=[common, model, out], help="histogram of effects")
    s.add_argument("--trim", type=float, default=0.005)
    s.add_argument("--significant", action="store_true")
    s.set_defaults(func=cmd_hist)

    s = sub.add_parser("policy-tree", parents=[common, data, model, out],
                       help="exact depth-1/2 treatment rule")
    s.add_argument("--depth", type=int, default=2)
    s.add_argument("--allowed", help="comma-separated covariates the tree may split on")
    s.add_argument("--direction", choices=("maximize", "minimize"), default="minimize")
    s.add_argument("--text", action="store_true", help="also print the tree")
    s.set_defaults(func=cmd_policy_tree)

    s = sub.add_parser("allocate", parents=[common, data, out], help="treat the best K units")
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--model")
    s.add_argument("--rewards", help="CSV with a reward column (instead of a model)")
    s.add_argument("--column", default="reward")
    s.add_argument("--direction", choices=("maximize", "minimize"), default="maximize")
    s.add_argument("--summary", action="store_true")
    s.set_defaults(func=cmd_allocate)

    s = sub.add_parser("simulate", parents=[common], help="write a synthetic data set")
    s.add_argument("--out", required=True, help="CSV path; schema and truth JSON go alongside")
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--p", type=int, default=5)
    s.add_argument("--tau", choices=("constant", "step", "rule"), default="step")
    s.add_argument("--tau-value", type=float, default=0.5)
    s.add_argument("--complier-share", type=float, default=0.4)
    s.add_argument("--always-share", type=float, default=0.1)
    s.add_argument("--never-share", type=float, help="default: the remainder")
    s.add_argument("--noise", choices=("gaussian", "t4"), default="gaussian")
    s.add_argument("--noise-scale", type=float, default=1.0)
    s.add_argument("--z-rate", type=float, nargs="+", default=[0.5],
                   help="instrument rate per stratum")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("run", parents=[common], help="full pipeline from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--output-dir")
    s.add_argument("--seed", type=int)
    s.add_argument("--trees", dest="n_trees", type=int)
    s.add_argument("--paper-scale", action="store_true")
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads:
        set_threads(args.threads)
    try:
        args.func(args)
    except IvForestError as exc:
        print(f"ivforest {args.command}: error: {exc}", file=sys.stderr)
        return exit_code(exc)
    except BrokenPipeError:
        # output piped into something like head
        sys.stdout = open(os.devnull, "w")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
