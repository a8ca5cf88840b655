import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from peerassign import peereffect as P
from peerassign.cohort import SynthConfig, synth_cohort
from peerassign.errors import EstimationError, ValidationError, WeakInstrumentError
from peerassign.evalharness import uniform_baseline_omega


def true_design(cohort, truth, class_ids=None):
    ids = cohort.class_ids if class_ids is None else class_ids
    return P.build_design(cohort, {c: truth.friend_omega(cohort, c) for c in ids}, class_ids=ids)


def test_leave_one_out_mean():
    np.testing.assert_allclose(P.leave_one_out_mean([1.0, 2.0, 3.0]), [2.5, 2.0, 1.5])
    np.testing.assert_allclose(P.leave_one_out_mean(np.full(4, 0.3)), 0.3)
    with pytest.raises(ValidationError):
        P.leave_one_out_mean([1.0])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=12))
def test_leave_one_out_mean_property(z):
    z = np.array(z)
    w = P.leave_one_out_mean(z)
    for i in range(len(z)):
        assert w[i] == pytest.approx(np.delete(z, i).mean(), abs=1e-12)


def test_design_invariants(small_synth):
    cohort, truth = small_synth
    d = true_design(cohort, truth)
    assert d.n == cohort.n
    schools = cohort.school_ids
    for k, s in enumerate(schools[1:]):
        assert d.school_dummies[:, k].sum() == np.sum(cohort.school_id == s)
    assert len(d.dummy_names) == len(schools) - 1
    with pytest.raises(ValidationError, match="no friendship matrix"):
        P.build_design(cohort, {})


def test_constant_z_classroom(small_synth):
    cohort, _ = small_synth
    c = cohort.class_ids[0]
    r = cohort.rows(c)
    sub = cohort.subset([c])
    sub.z[:] = 0.4
    sub.X[:, 1] = 0.4
    rng = np.random.default_rng(0)
    w = rng.random((len(r), len(r)))
    np.fill_diagonal(w, 0)
    d = P.build_design(sub, {c: w / w.sum(axis=1, keepdims=True)})
    np.testing.assert_allclose(d.endog, 0.4)
    np.testing.assert_allclose(d.instrument, 0.4)


def test_ols_matches_lstsq():
    rng = np.random.default_rng(1)
    X = np.column_stack([np.ones(50), rng.normal(size=(50, 3))])
    y = X @ [1.0, 2.0, -1.0, 0.5] + 0.1 * rng.normal(size=50)
    res = P.ols(y, X)
    np.testing.assert_allclose(res.coef, np.linalg.lstsq(X, y, rcond=None)[0], atol=1e-12)
    cov = res.sigma2 * np.linalg.inv(X.T @ X)
    np.testing.assert_allclose(res.se, np.sqrt(np.diag(cov)), rtol=1e-10)


def test_first_stage_identity_uniform(small_synth):
    cohort, _ = small_synth
    d = P.build_design(cohort, {c: uniform_baseline_omega(len(cohort.rows(c))) for c in cohort.class_ids})
    np.testing.assert_allclose(d.endog, d.instrument, atol=1e-12)
    fs = P.first_stage(d)
    assert fs.pi1 == pytest.approx(1.0, abs=1e-10)
    np.testing.assert_allclose(fs.fitted, d.endog, atol=1e-10)
    # uniform world: IV and linear-in-means coincide
    assert P.two_stage_iv(d).beta == pytest.approx(P.linear_in_means(d).beta, abs=1e-8)


def test_noiseless_recovers_beta(small_synth):
    cohort, truth = small_synth
    d = true_design(cohort, truth)
    X0, _ = d.exog()
    g = np.random.default_rng(2).normal(size=X0.shape[1])
    d = replace(d, y=1.3 * d.endog + X0 @ g)
    iv = P.two_stage_iv(d)
    ols = P.friendship_ols(d)
    assert iv.beta == pytest.approx(1.3, abs=1e-8)
    assert ols.beta == pytest.approx(iv.beta, abs=1e-8)


def test_noiseless_linear_in_means(small_synth):
    cohort, truth = small_synth
    d = true_design(cohort, truth)
    X0, _ = d.exog()
    d = replace(d, y=0.7 * d.instrument + X0[:, 1])
    assert P.linear_in_means(d).beta == pytest.approx(0.7, abs=1e-9)


def test_residual_orthogonality(small_synth):
    cohort, truth = small_synth
    d = true_design(cohort, truth)
    est = P.two_stage_iv(d)
    u = P.second_stage_residuals(d, est)
    X0, _ = d.exog()
    Z = np.column_stack([d.instrument, X0])
    assert np.max(np.abs(Z.T @ u)) < 1e-8


def test_constant_shift_keeps_beta(small_synth):
    cohort, truth = small_synth
    d = true_design(cohort, truth)
    a = P.two_stage_iv(d)
    b = P.two_stage_iv(replace(d, y=d.y + 5.0))
    assert abs(a.beta - b.beta) < 1e-10
    assert b.coef["const"] == pytest.approx(a.coef["const"] + 5.0, abs=1e-8)


def test_weak_instrument_guard(small_synth):
    cohort, truth = small_synth
    d = true_design(cohort, truth)
    rng = np.random.default_rng(3)
    d = replace(d, endog=rng.normal(size=d.n))
    with pytest.raises(WeakInstrumentError):
        P.two_stage_iv(d, min_F=1e6)


def _dense_loglik(y, X, groups, psi):
    """Concentrated Gaussian log-likelihood with a dense covariance matrix."""
    n = len(y)
    J = (groups[:, None] == groups[None, :]).astype(float)
    V = np.eye(n) + psi * J
    Vi = np.linalg.inv(V)
    b = np.linalg.solve(X.T @ Vi @ X, X.T @ Vi @ y)
    r = y - X @ b
    s2 = r @ Vi @ r / n
    _, logdet = np.linalg.slogdet(V)
    return -0.5 * n * (np.log(2 * np.pi) + np.log(s2) + 1) - 0.5 * logdet, b


def test_re_profile_matches_dense_oracle():
    rng = np.random.default_rng(4)
    groups = np.repeat(np.arange(8), rng.integers(3, 7, 8))
    n = len(groups)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
    y = X @ [0.5, 1.0, -2.0] + 0.7 * rng.normal(size=8)[groups] + 0.5 * rng.normal(size=n)
    prof = P._Profile(y, X, groups, ("a", "b", "c"))
    for t in (-3.0, 0.0, 1.5):
        ll, coef, _, _ = prof.fit(t)
        ll_d, b_d = _dense_loglik(y, X, groups, np.exp(t))
        assert ll == pytest.approx(ll_d, rel=1e-10)
        np.testing.assert_allclose(coef, b_d, atol=1e-10)
    fit = P.re_mle(y, X, groups)
    assert fit.sigma2_mu > 0 and fit.sigma2_eps > 0
    lo, hi = P.LOG_PSI_BOUNDS
    assert fit.loglik >= max(prof.loglik(lo), prof.loglik(hi)) - 1e-9


def test_re_no_class_effect():
    cohort, truth = synth_cohort(SynthConfig(num_schools=20, sigma_mu=0.0, seed=7))
    d = true_design(cohort, truth, cohort.classes_in_split("train"))
    a = P.two_stage_iv(d, True)
    b = P.two_stage_iv(d, False)
    assert abs(a.beta - b.beta) < 1e-3
    assert a.sigma2_mu <= 1e-4


def test_estimate_all_and_report(small_synth):
    cohort, truth = small_synth
    d = true_design(cohort, truth)
    est = P.estimate_all(d)
    assert set(est) == {"lim", "lim_re", "iv", "iv_re"}
    for e in est.values():
        assert e.se_beta > 0 and e.sigma2_eps >= 0 and e.sigma2_mu >= 0
    assert est["iv"].method == "2SLS" and est["iv_re"].method == "2SLS+RE"
    back = json.loads(P.report_json(est))
    assert back["iv"]["beta"] == est["iv"].beta
    table = P.report_table(est)
    assert "Observations" in table and "F statistic" in table


def test_rank_deficient_raises(small_synth):
    cohort, truth = small_synth
    d = true_design(cohort, truth)
    d = replace(d, controls=np.column_stack([d.controls[:, :1], d.controls[:, :1], d.controls[:, 2:]]))
    with pytest.raises(EstimationError):
        P.two_stage_iv(d)


@pytest.mark.slow
def test_iv_bias_shrinks_with_size():
    def mean_bias(n_schools, reps):
        out = []
        for r in range(reps):
            c, t = synth_cohort(SynthConfig(num_schools=n_schools, seed=50_000 + r))
            out.append(P.two_stage_iv(true_design(c, t, c.classes_in_split("train"))).beta)
        return abs(np.mean(out) - 1.0), np.std(out)

    b_small, sd_small = mean_bias(30, 60)
    b_big, sd_big = mean_bias(60, 60)
    assert sd_big < sd_small
    assert b_big < b_small + 2 * sd_small / np.sqrt(60)
