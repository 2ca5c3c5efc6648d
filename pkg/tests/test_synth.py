import itertools
import json
import math

import numpy as np
import pandas as pd
import pytest

from ivforest.dataset import Schema, load_csv
from ivforest.errors import ValidationError
from ivforest.synth import (DgpSpec, brute_force_policy_oracle, generate, generate_table,
                            population_late, write_dataset)


def test_full_compliance_means_d_equals_z():
    frame, _ = generate(DgpSpec(n=500, share_always=0, share_never=0, share_complier=1.0))
    np.testing.assert_array_equal(frame.d, frame.z)


def test_itt_is_late_times_compliance():
    _, truth = generate(DgpSpec(n=500, tau="constant", tau_value=0.10, share_always=0.2,
                                share_never=0.5, share_complier=0.3))
    assert truth.true_late == pytest.approx(0.10)
    assert truth.true_itt == pytest.approx(0.03)


def test_step_late_by_symmetry():
    spec = DgpSpec(n=40000, tau="step", seed=1)
    _, truth = generate(spec)
    assert population_late(spec) == 0.25
    assert abs(truth.sample_late - 0.25) < 0.02


@pytest.mark.parametrize("kind, expected", [("constant", 0.5), ("step", 0.25), ("rule", 0.125)])
def test_population_late(kind, expected):
    assert population_late(DgpSpec(tau=kind)) == expected


def test_seed_determinism():
    a, _ = generate_table(DgpSpec(n=300, seed=4))
    b, _ = generate_table(DgpSpec(n=300, seed=4))
    c, _ = generate_table(DgpSpec(n=300, seed=5))
    pd.testing.assert_frame_equal(a, b)
    assert not a.equals(c)


def test_household_level_instrument_with_exact_counts():
    df, truth = generate_table(DgpSpec(n=3000, z_rate=(0.3, 0.6), seed=2))
    hh = df.groupby("household_id")
    assert (hh["z"].nunique() == 1).all()
    assert (hh["stratum"].nunique() == 1).all()
    first = hh.first()
    for s, rate in enumerate((0.3, 0.6)):
        cell = first[first["stratum"] == s]
        assert cell["z"].sum() == round(rate * len(cell))
    np.testing.assert_allclose(truth.z_propensity, np.where(df["stratum"] == 0, 0.3, 0.6))


def test_household_sizes_bounded():
    df, truth = generate_table(DgpSpec(n=2000, seed=3))
    sizes = df.groupby("household_id").size()
    assert sizes.max() <= 3 and sizes.sum() == 2000
    assert truth.extra["n_households"] == len(sizes)


def test_t4_noise_unit_scale():
    spec = DgpSpec(n=60000, p=1, tau="constant", tau_value=0.0, share_always=0, share_never=1 - 0.2,
                   share_complier=0.2, noise="t4", seed=9)
    df, truth = generate_table(spec)
    resid = df["y"] - np.where(truth.compliance_type == 1, -0.1, 0.0)
    assert resid.var() == pytest.approx(1.0, rel=0.1)


@pytest.mark.parametrize("kw", [
    dict(tau="cubic"), dict(noise="cauchy"), dict(share_complier=0.1, share_never=0.8),
    dict(share_always=0.5), dict(cluster_sizes=(0.5, 0.6)), dict(z_rate=(1.0,)),
    dict(n=1), dict(tau="rule", p=1),
])
def test_spec_validation(kw):
    with pytest.raises(ValidationError):
        DgpSpec(**kw)


def test_spec_dict_round_trip():
    spec = DgpSpec(z_rate=(0.2, 0.4), tau="rule")
    assert DgpSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_write_dataset_round_trip(tmp_path):
    spec = DgpSpec(n=400, p=3, z_rate=(0.4, 0.6), seed=1)
    csv, side = write_dataset(spec, tmp_path / "sim.csv")
    schema = Schema.from_json(tmp_path / "sim.schema.json")
    frame = load_csv(csv, schema)
    assert frame.n == 400 and frame.strata is not None
    truth = json.loads(side.read_text())
    assert truth["true_late"] == 0.25 and truth["spec"]["seed"] == 1
    direct, _ = generate(spec)
    np.testing.assert_allclose(frame.y, direct.y, rtol=1e-15)


def test_oracle_depth0_and_limits(rng):
    r = np.array([1.0, -3.0, 1.5])
    assert brute_force_policy_oracle(np.zeros((3, 1)), r, 0) == 0.0
    assert brute_force_policy_oracle(np.zeros((3, 1)), -r, 0) == 0.5
    with pytest.raises(ValidationError):
        brute_force_policy_oracle(rng.normal(size=(501, 1)), rng.normal(size=501))
    with pytest.raises(ValidationError):
        brute_force_policy_oracle(rng.normal(size=(10, 5)), rng.normal(size=10))
    with pytest.raises(ValidationError):
        brute_force_policy_oracle(rng.normal(size=(10, 1)), rng.normal(size=10), 3)


def _enumerate_policies(X, r, depth):
    """Slow reference: list every depth-limited tree over midpoint cuts."""
    n, p = X.shape
    cuts = [(j, t) for j in range(p)
            for t in 0.5 * (np.unique(X[:, j])[:-1] + np.unique(X[:, j])[1:])]

    def stumps(rows):
        yield rows & False
        yield rows
        for j, t in cuts:
            go = rows & (X[:, j] <= t)
            for a, b in itertools.product((False, True), repeat=2):
                yield (go & a) | (rows & ~go & b)

    everyone = np.ones(n, bool)
    if depth == 0:
        masks = [everyone & False, everyone]
    elif depth == 1:
        masks = list(stumps(everyone))
    else:
        masks = list(stumps(everyone))
        for j, t in cuts:
            go = X[:, j] <= t
            masks += [a | b for a in stumps(go) for b in stumps(~go)]
    return max(math.fsum(r[m]) for m in masks)


@pytest.mark.parametrize("depth", [0, 1, 2])
def test_oracle_matches_plain_enumeration(depth):
    rng = np.random.default_rng(40 + depth)
    for _ in range(15):
        n, p = int(rng.integers(2, 16)), int(rng.integers(1, 4))
        X = rng.integers(0, 4, (n, p)).astype(float)
        r = rng.integers(-16, 17, n) / 8
        assert brute_force_policy_oracle(X, r, depth) == _enumerate_policies(X, r, depth)


def test_oracle_monotone_in_depth(rng):
    X = rng.normal(size=(25, 2))
    r = rng.normal(size=25)
    vals = [brute_force_policy_oracle(X, r, k) for k in range(3)]
    assert vals[0] <= vals[1] <= vals[2] <= np.clip(r, 0, None).sum() + 1e-12
