import json

import numpy as np
import pandas as pd
import pytest

from ivforest.cli import (EXIT_DATA, EXIT_OK, EXIT_VALIDATION, FAILED_MARKER, MANIFEST,
                          RunConfig, main, run_pipeline)
from ivforest.errors import ValidationError


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    csv = d / "sim.csv"
    assert main(["simulate", "--out", str(csv), "--n", "4000", "--p", "3", "--seed", "2"]) == 0
    return d, csv, d / "sim.schema.json"


@pytest.fixture(scope="module")
def model(sim):
    d, csv, schema = sim
    path = d / "model.npz"
    assert main(["fit", "--input", str(csv), "--schema", str(schema), "--model", str(path),
                 "--trees", "200", "--seed", "1"]) == 0
    return path


def _json_out(capsys):
    return json.loads(capsys.readouterr().out)


def test_simulate_fit_late_recovers_truth(sim, model, capsys):
    d, csv, schema = sim
    truth = json.loads((d / "sim.truth.json").read_text())
    assert main(["late", "--input", str(csv), "--schema", str(schema), "--model", str(model)]) == 0
    out = _json_out(capsys)
    f = out["forest"]
    assert abs(f["estimate"] - truth["true_late"]) < 3 * f["se"]
    assert abs(out["2sls"]["estimate"] - truth["true_late"]) < 3 * out["2sls"]["se"]


def test_predict_gate_quantiles_hist(sim, model, tmp_path, capsys):
    d, csv, schema = sim
    common = ["--input", str(csv), "--schema", str(schema), "--model", str(model)]
    assert main(["predict", *common, "--out", str(tmp_path / "ite.csv")]) == 0
    ite = pd.read_csv(tmp_path / "ite.csv")
    assert len(ite) == 4000 and {"tau_hat", "se", "sig10"} <= set(ite.columns)
    assert main(["gate", *common, "--subgroup", "x1 > 0", "--out", str(tmp_path / "g.csv")]) == 0
    g = pd.read_csv(tmp_path / "g.csv")
    assert g["name"].tolist() == ["late", "x1 > 0", "not (x1 > 0)"]
    assert g["estimate"][1] > g["estimate"][2]
    assert main(["quantiles", "--model", str(model)]) == 0
    q = capsys.readouterr().out
    assert q.startswith("outcome,mean,q00,q25,q50,q75,q100")
    assert main(["hist", "--model", str(model)]) == 0
    h = _json_out(capsys)
    assert h["n_retained"] + h["n_trimmed"] == 4000
    assert main(["varimp", "--model", str(model)]) == 0
    vi = capsys.readouterr().out.splitlines()
    assert vi[1].startswith("x1,")


def test_predict_new_points(sim, model, tmp_path, capsys):
    d, csv, schema = sim
    df = pd.read_csv(csv).head(50)
    df["y"] = 0.0
    df.to_csv(tmp_path / "new.csv", index=False)
    assert main(["predict", "--input", str(tmp_path / "new.csv"), "--schema", str(schema),
                 "--model", str(model), "--no-variance"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 51


def test_late_on_other_data_rejected(sim, model, tmp_path, capsys):
    d, csv, schema = sim
    pd.read_csv(csv).head(100).to_csv(tmp_path / "part.csv", index=False)
    rc = main(["late", "--input", str(tmp_path / "part.csv"), "--schema", str(schema),
               "--model", str(model)])
    assert rc == EXIT_VALIDATION
    assert "fingerprint" in capsys.readouterr().err


def test_allocate_rejects_zero_k(tmp_path, capsys):
    pd.DataFrame({"unit_id": [1, 2, 3], "reward": [0.5, 1.0, -1.0]}).to_csv(
        tmp_path / "r.csv", index=False)
    assert main(["allocate", "--rewards", str(tmp_path / "r.csv"), "--k", "0"]) == EXIT_VALIDATION
    assert "K must be" in capsys.readouterr().err
    assert main(["allocate", "--rewards", str(tmp_path / "r.csv"), "--k", "2"]) == EXIT_OK
    out = pd.read_csv(__import__("io").StringIO(capsys.readouterr().out))
    assert out["selected"].tolist() == [1, 1, 0]


def test_policy_tree_depth_three_rejected(sim, model, capsys):
    d, csv, schema = sim
    rc = main(["policy-tree", "--input", str(csv), "--schema", str(schema), "--model", str(model),
               "--depth", "3"])
    assert rc == EXIT_VALIDATION
    assert "exponentially" in capsys.readouterr().err


def test_policy_tree_and_allocation_from_model(sim, model, capsys):
    d, csv, schema = sim
    common = ["--input", str(csv), "--schema", str(schema), "--model", str(model)]
    assert main(["policy-tree", *common, "--direction", "maximize", "--allowed", "x1,x2"]) == 0
    tree = _json_out(capsys)
    assert tree["depth"] <= 2
    assert {n["feature"] for n in tree["nodes"] if "feature" in n} <= {"x1", "x2"}
    assert main(["allocate", *common, "--k", "100", "--summary"]) == 0
    summary = json.loads(capsys.readouterr().out.splitlines()[0])
    assert summary["K"] == 100 and summary["certified"]


def test_missing_input_is_data_error(sim, capsys):
    d, csv, schema = sim
    rc = main(["ingest", "--input", str(d / "nope.csv"), "--schema", str(schema)])
    assert rc == EXIT_DATA


def test_ingest_summary(sim, capsys):
    d, csv, schema = sim
    assert main(["ingest", "--input", str(csv), "--schema", str(schema)]) == 0
    out = _json_out(capsys)
    assert out["n"] == 4000 and out["rows_kept"] == 4000


def _config(d, csv, schema, **kw):
    cfg = {"input": csv.name, "schema": schema.name, "forest": {"n_trees": 40},
           "inference": {"nuisance": {"n_trees": 20}}, "subgroups": ["x2 >= 1"],
           "policy": {"objective": "y", "direction": "maximize", "K": 500}, "seed": 3}
    cfg.update(kw)
    path = d / f"cfg_{len(kw)}_{'_'.join(kw)}.json"
    path.write_text(json.dumps(cfg))
    return path


def test_run_is_deterministic(sim, tmp_path):
    d, csv, schema = sim
    cfg = _config(d, csv, schema)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(cfg), "--output-dir", str(a)]) == 0
    assert main(["run", "--config", str(cfg), "--output-dir", str(b)]) == 0
    ma = json.loads((a / MANIFEST).read_text())["files"]
    mb = json.loads((b / MANIFEST).read_text())["files"]
    assert ma == mb
    expected = {"ingest.json", "quantiles.csv", "late_table.csv", "gate_table.csv",
                "policy_tree.json", "policy_tree.txt", "allocation.csv", "allocation.json",
                "allocation_profile.csv", "y/model.npz", "y/ite.csv", "y/late.json",
                "y/gates.csv", "y/varimp.csv", "y/profile.csv", "y/hist.json"}
    assert expected <= set(ma)
    assert not (a / FAILED_MARKER).exists()


def test_run_itt_without_treatment(sim, tmp_path):
    d, csv, schema = sim
    df = pd.read_csv(csv).drop(columns="d")
    df.to_csv(tmp_path / "nod.csv", index=False)
    s = json.loads(schema.read_text())
    s["treatment"] = None
    (tmp_path / "nod.schema.json").write_text(json.dumps(s))
    cfg = _config(tmp_path, tmp_path / "nod.csv", tmp_path / "nod.schema.json", estimand="itt",
                  policy=None)
    assert main(["run", "--config", str(cfg), "--output-dir", str(tmp_path / "out")]) == 0
    late = json.loads((tmp_path / "out" / "y" / "late.json").read_text())
    assert late["estimand"] == "itt"


def test_run_failure_marks_stage(sim, tmp_path, capsys):
    d, csv, schema = sim
    cfg = _config(d, csv, schema, outcomes=["nonexistent"])
    rc = main(["run", "--config", str(cfg), "--output-dir", str(tmp_path / "out")])
    assert rc == EXIT_DATA
    assert (tmp_path / "out" / FAILED_MARKER).exists()
    assert "[ingest]" in capsys.readouterr().err


def test_config_precedence(sim):
    d, csv, schema = sim
    base = {"input": str(csv), "schema": str(schema)}
    assert RunConfig.from_dict(base).tree_params().n_trees == 2000
    assert RunConfig.from_dict({**base, "scale": "paper"}).tree_params().n_trees == 100000
    cfg = RunConfig.from_dict({**base, "scale": "paper", "forest": {"n_trees": 400}})
    assert cfg.tree_params().n_trees == 400
    with pytest.raises(ValidationError):
        RunConfig.from_dict({**base, "colour": 1})
    with pytest.raises(ValidationError):
        RunConfig.from_dict({**base, "forest": {"leaves": 3}}).tree_params()


def test_fit_flags_override_config(sim, tmp_path, capsys):
    d, csv, schema = sim
    cfg = tmp_path / "fit.json"
    cfg.write_text(json.dumps({"forest": {"n_trees": 12, "seed": 5}, "center": False}))
    args = ["fit", "--input", str(csv), "--schema", str(schema), "--config", str(cfg),
            "--model", str(tmp_path / "m.npz")]
    assert main(args) == 0
    assert _json_out(capsys)["n_trees"] == 12
    assert main(args + ["--trees", "8"]) == 0
    assert _json_out(capsys)["n_trees"] == 8


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0
