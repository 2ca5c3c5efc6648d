import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ivforest.aggregate import (average_effect, compute_dr_scores_itt, compute_dr_scores_late,
                                freedman_diaconis_width, gate, histogram_bins,
                                itt_outcome_regressions, itt_scores_from_model, ite_quantiles,
                                profile_by_effect_sign, quantile_table, scores_from_model,
                                trim_tails)
from ivforest.errors import ValidationError, WeakIdentificationError
from ivforest.forest import TreeParams
from ivforest.ivforest import NuisanceParams, fit_iv_forest
from ivforest.synth import DgpSpec, generate, mu_function


def test_zero_outcome_zero_scores(rng):
    z = rng.integers(0, 2, 100).astype(float)
    g = compute_dr_scores_itt(np.zeros(100), z, np.full(100, 0.5), np.zeros(100), np.zeros(100))
    assert np.all(g.scores == 0)


def test_oracle_itt_scores_unbiased():
    spec = DgpSpec(n=20000, p=3, tau="step", seed=21)
    frame, truth = generate(spec)
    X = frame.X
    # oracle regressions of Y on (X, Z)
    shift = np.array([0.2, -0.1, 0.0]) @ [spec.share_always, spec.share_never, spec.share_complier]
    base = mu_function(spec, X) + shift + spec.share_always * truth.tau
    m1 = base + spec.share_complier * truth.tau
    m0 = base
    g = compute_dr_scores_itt(frame.y, frame.z, truth.z_propensity, m1, m0, frame.cluster_id)
    est = average_effect(g)
    assert abs(est.estimate - truth.true_itt) < 2 * est.se


def test_late_scores_reduce_to_itt_under_perfect_compliance(rng):
    n = 300
    z = rng.integers(0, 2, n).astype(float)
    y = rng.normal(size=n)
    zh = np.full(n, z.mean())
    yh = rng.normal(size=n)
    tau = rng.normal(size=n)
    late = compute_dr_scores_late(y, z, z, zh, yh, zh, tau, np.ones(n))
    m1, m0 = itt_outcome_regressions(yh, zh, tau)
    itt = compute_dr_scores_itt(y, z, zh, m1, m0)
    np.testing.assert_allclose(late.scores, itt.scores, rtol=1e-12, atol=1e-12)
    mean_mode = compute_dr_scores_late(y, z, z, zh, yh, zh, tau, np.ones(n), mode="mean")
    np.testing.assert_allclose(mean_mode.scores, itt.scores, rtol=1e-12, atol=1e-12)


def test_weak_compliance_rejected(rng):
    n = 50
    z = rng.integers(0, 2, n).astype(float)
    with pytest.raises(WeakIdentificationError):
        compute_dr_scores_late(np.zeros(n), z, z, np.full(n, 0.5), np.zeros(n), np.zeros(n),
                               np.zeros(n), np.full(n, 0.01))


def test_compliance_floor_and_propensity_clip(rng):
    n = 40
    z = rng.integers(0, 2, n).astype(float)
    comp = np.r_[np.full(10, 0.01), np.full(30, 0.5)]
    zh = np.r_[np.full(5, 0.001), np.full(35, 0.5)]
    s = compute_dr_scores_late(rng.normal(size=n), z, z, zh, np.zeros(n), np.zeros(n),
                               np.zeros(n), comp)
    assert s.flags["n_compliance_floored"] == 10
    assert s.flags["n_propensity_clipped"] == 5
    with pytest.raises(ValidationError):
        compute_dr_scores_late(np.zeros(n), z, z, zh, np.zeros(n), np.zeros(n), np.zeros(n),
                               comp, mode="median")


@pytest.fixture(scope="module")
def fitted():
    frame, truth = generate(DgpSpec(n=20000, p=3, tau="step", share_always=0, share_never=0,
                                    share_complier=1.0, noise_scale=0.5, seed=6))
    m = fit_iv_forest(frame, TreeParams(n_trees=100, seed=2), center=False, oob_variance=False)
    return frame, truth, m


def test_gate_all_rows_equals_overall(fitted):
    frame, _, m = fitted
    s = scores_from_model(m, frame)
    assert gate(s).estimate == average_effect(s).estimate
    assert gate(s, np.ones(frame.n, bool)).se == average_effect(s).se


def test_gate_partition_decomposes(fitted):
    frame, _, m = fitted
    s = scores_from_model(m, frame)
    parts = [frame.X[:, 1] == 0, (frame.X[:, 1] == 1) & (frame.X[:, 0] > 0),
             (frame.X[:, 1] == 1) & (frame.X[:, 0] <= 0)]
    total = sum(gate(s, p).share * gate(s, p).estimate for p in parts)
    assert total == pytest.approx(average_effect(s).estimate, abs=1e-10)


def test_region_gates(fitted):
    frame, _, m = fitted
    s = scores_from_model(m, frame)
    x1 = frame.X[:, 0]
    assert abs(gate(s, x1 <= 0).estimate - 0.0) < 0.03
    assert abs(gate(s, x1 > 0).estimate - 0.5) < 0.03


def test_itt_scores_from_late_model(fitted):
    frame, truth, m = fitted
    s = itt_scores_from_model(m, frame)
    assert s.estimand == "itt" and len(s) == frame.n
    assert abs(s.estimate - truth.true_itt) < 3 * average_effect(s).se


def test_empty_gate_rejected(fitted):
    frame, _, m = fitted
    with pytest.raises(ValidationError):
        gate(scores_from_model(m, frame), np.zeros(frame.n, bool))


@pytest.mark.parametrize("v, expected", [
    ([1, 2, 3, 4, 5], {0.0: 1, 0.25: 2, 0.5: 3, 0.75: 4, 1.0: 5}),
    ([2.5] * 7, {p: 2.5 for p in (0.0, 0.25, 0.5, 0.75, 1.0)}),
])
def test_quantiles(v, expected):
    assert ite_quantiles(v) == expected


def test_quantile_table_columns():
    t = quantile_table({"a": [1, 2, 3], "b": [0, 0, 1]})
    assert list(t.columns) == ["outcome", "mean", "q00", "q25", "q50", "q75", "q100"]


def test_profile_positive_everywhere_marks_empty_side(rng):
    X = rng.normal(size=(50, 2))
    out = profile_by_effect_sign(X, ["a", "b"], np.full(50, 0.1), np.arange(50))
    assert out.attrs["empty_side"] == "decrease"
    assert out["difference"].isna().all()


def test_profile_detects_driving_covariate():
    frame, truth = generate(DgpSpec(n=4000, p=4, tau="step", seed=8))
    out = profile_by_effect_sign(frame.X, frame.covariate_names, truth.tau - 0.25,
                                 frame.cluster_id)
    p = dict(zip(out["variable"], out["p_value"]))
    assert p["x1"] < 0.01
    assert all(p[c] > 0.05 for c in ("x2", "x3", "x4"))


def test_uniform_histogram_width():
    v = np.random.default_rng(0).random(1000)
    h = histogram_bins(v)
    kept, _, n_trim = trim_tails(v)
    q75, q25 = np.percentile(kept, [75, 25])
    assert h.width == pytest.approx(2 * (q75 - q25) * kept.size ** (-1 / 3), abs=1e-12)
    assert h.width == pytest.approx(0.1, abs=0.01)
    assert h.rule == "freedman-diaconis"


def test_constant_vector_single_bin():
    h = histogram_bins(np.full(100, 3.0))
    assert h.counts.tolist() == [100] and h.rule == "sturges"


def test_zero_iqr_falls_back_to_sturges():
    v = np.r_[np.zeros(500), np.linspace(1, 2, 10)]
    h = histogram_bins(v, trim=0)
    assert h.rule == "sturges"
    assert h.counts.sum() == v.size
    assert len(h.counts) == math.ceil(math.log2(v.size)) + 1


def test_trim_count():
    kept, _, n_trim = trim_tails(np.arange(1000.0))
    assert kept.size == 990 and n_trim == 10
    assert kept.min() == 5 and kept.max() == 994


@given(st.integers(10, 3000), st.integers(0, 10_000))
def test_histogram_properties(n, seed):
    v = np.random.default_rng(seed).standard_t(3, n)
    h = histogram_bins(v, significant=np.arange(n) % 2 == 0)
    assert h.counts.sum() == n - 2 * math.floor(0.005 * n)
    assert (h.sig_counts <= h.counts).all()
    if h.rule == "freedman-diaconis":
        kept, _, _ = trim_tails(v)
        assert h.width == pytest.approx(freedman_diaconis_width(kept), abs=1e-12)
        np.testing.assert_allclose(np.diff(h.edges), h.width, rtol=1e-9)
