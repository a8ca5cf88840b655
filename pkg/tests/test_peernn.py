import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_cohort
from peerassign.errors import ConfigError, NumericError, SingularityError, ValidationError
from peerassign.peernn import (
    G_INTERCEPT,
    G_SLOPE,
    Hyper,
    OmegaMatrix,
    OptConfig,
    PeerNNParams,
    check_omega,
    forward,
    g_approx,
    gradient,
    homophily_penalty,
    loss_bias_sq,
    loss_variance,
    masked_row_softmax,
    multinomial_covariance,
    predict_omega,
    rescale,
    total_loss,
    train,
    transitivity_penalty,
)

finite = st.floats(-30, 30, allow_nan=False)


def uniform(n):
    return (np.ones((n, n)) - np.eye(n)) / (n - 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 9).flatmap(lambda n: arrays(np.float64, (n, n), elements=finite)))
def test_softmax_is_row_stochastic(u):
    om = masked_row_softmax(u)
    check_omega(om)
    assert np.all(np.diag(om) == 0)


def test_softmax_two_students():
    om = masked_row_softmax(np.array([[5.0, -3.0], [100.0, 7.0]]))
    assert np.array_equal(om, [[0.0, 1.0], [1.0, 0.0]])


def test_softmax_shift_invariance_and_diagonal_ignored():
    rng = np.random.default_rng(0)
    u = rng.normal(size=(5, 5))
    v = u + rng.normal(size=5)[:, None]
    np.fill_diagonal(v, 1e9)
    np.testing.assert_allclose(masked_row_softmax(u), masked_row_softmax(v), atol=1e-14)


def test_softmax_large_values_stable():
    u = np.array([[0.0, 800.0, 799.0], [1.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
    om = masked_row_softmax(u)
    assert np.all(np.isfinite(om))
    np.testing.assert_allclose(om[0, 1:], [1 / (1 + np.exp(-1)), np.exp(-1) / (1 + np.exp(-1))])


def test_softmax_rejects():
    with pytest.raises(ValidationError):
        masked_row_softmax(np.zeros((1, 1)))
    u = np.zeros((3, 3))
    u[0, 1] = np.nan
    with pytest.raises(NumericError):
        masked_row_softmax(u)


def test_check_omega():
    check_omega(uniform(4))
    bad = uniform(4)
    bad[0, 0] = 1e-12
    with pytest.raises(ValidationError, match="diagonal"):
        check_omega(bad)
    with pytest.raises(ValidationError):
        OmegaMatrix(np.full((3, 3), 0.5))


def test_forward_shapes():
    p = PeerNNParams.init(4, seed=1)
    fw = forward(p, np.random.default_rng(0).random((7, 4)))
    assert fw.sigma.shape == (7, 10) and fw.delta.shape == (7, 10)
    assert fw.upsilon.shape == (7, 7)
    check_omega(fw.omega)
    with pytest.raises(ValidationError):
        forward(p, np.zeros((7, 3)))
    om = predict_omega(p, np.ones((3, 4)), class_id=2, student_ids=[4, 5, 6])
    assert om.student_ids == (4, 5, 6) and om.class_id == 2


def test_zero_params_give_uniform():
    p = PeerNNParams(np.zeros((3, 10)), np.zeros((10, 10)), np.zeros((10, 10)))
    np.testing.assert_array_equal(forward(p, np.ones((5, 3))).omega, uniform(5))


def test_homophily_golden():
    # each row: own e_i against the mean of the other two, |(-1, .5, .5)|^2 = 1.5
    assert homophily_penalty(uniform(3), np.eye(3)) == pytest.approx(4.5, abs=1e-12)


def test_homophily_zero_when_sigma_constant():
    rng = np.random.default_rng(1)
    om = masked_row_softmax(rng.normal(size=(6, 6)))
    sigma = np.tile(rng.random(4), (6, 1))
    assert homophily_penalty(om, sigma) == pytest.approx(0.0, abs=1e-24)


def test_transitivity_uniform_three_is_zero():
    assert transitivity_penalty(uniform(3)) == pytest.approx(0.0, abs=1e-15)


def test_transitivity_needs_three():
    with pytest.raises(ValidationError):
        transitivity_penalty(uniform(2))


def test_transitivity_singular():
    om = np.array([[0, 1, 0], [1, 0, 0], [0.5, 0.5, 0]], dtype=float)
    with pytest.raises(SingularityError):
        transitivity_penalty(om)


def test_transitivity_direct_oracle():
    rng = np.random.default_rng(5)
    om = masked_row_softmax(rng.normal(size=(5, 5)))
    total = 0.0
    for i in range(5):
        denom = 1 - sum(om[i, j] * om[j, i] for j in range(5))
        for k in range(5):
            if k == i:
                continue
            two_step = sum(om[i, j] * om[j, k] for j in range(5))
            total += (om[i, k] - two_step / denom) ** 2
    assert transitivity_penalty(om) == pytest.approx(total, rel=1e-12)


def test_g_approx_tables():
    assert G_INTERCEPT == (1.0, 1.090, 1.154, 1.2, 1.333)
    assert G_SLOPE == (1.5, 0.727, 0.654, 0.5, 0.4)
    assert g_approx(0.0, 3) == pytest.approx(1.154)
    assert g_approx(2.0, 4) == pytest.approx(2.2)
    with pytest.raises(ValidationError):
        g_approx(1.0, 6)


def test_multinomial_covariance_examples():
    np.testing.assert_allclose(multinomial_covariance([0.5, 0.5], 2), [[0.5, -0.5], [-0.5, 0.5]])
    np.testing.assert_allclose(multinomial_covariance([0.0, 1.0], 3), np.zeros((2, 2)))
    with pytest.raises(ValidationError):
        multinomial_covariance([0.5, 0.6], 2)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(0.01, 1.0)), st.integers(1, 5))
def test_multinomial_covariance_properties(w, B):
    p = w / w.sum()
    C = multinomial_covariance(p, B)
    np.testing.assert_allclose(C, C.T)
    np.testing.assert_allclose(C.sum(axis=1), 0.0, atol=1e-12)
    assert np.linalg.eigvalsh(C).min() > -1e-12


def test_bias_loop_oracle():
    rng = np.random.default_rng(2)
    n = 6
    om = masked_row_softmax(rng.normal(size=(n, n)))
    A_s = rng.integers(0, 2, (n, 10))
    A_f = rng.integers(1, 4, (n, 10))
    B = rng.integers(1, 6, n)
    acc = 0.0
    for i in range(n):
        for q in range(10):
            ev = B[i] * sum(om[i, j] * A_s[j, q] for j in range(n))
            acc += (G_INTERCEPT[B[i] - 1] + G_SLOPE[B[i] - 1] * ev - A_f[i, q]) ** 2
    assert loss_bias_sq(om, A_s, A_f, B) == pytest.approx(acc / (n * 10), rel=1e-12)


def test_variance_loop_oracle():
    rng = np.random.default_rng(3)
    n = 5
    om = masked_row_softmax(rng.normal(size=(n, n)))
    A_s = rng.integers(0, 2, (n, 10)).astype(float)
    B = rng.integers(1, 6, n)
    acc = 0.0
    for i in range(n):
        C = multinomial_covariance(om[i], B[i])
        acc += G_SLOPE[B[i] - 1] ** 2 * np.trace(A_s.T @ C @ A_s)
    assert loss_variance(om, A_s, B) == pytest.approx(acc / (n * 10), rel=1e-12)


def test_loss_shape_mismatch():
    with pytest.raises(ValidationError):
        loss_bias_sq(uniform(3), np.zeros((3, 10)), np.ones((3, 9)), np.ones(3, int))


def test_gradient_zero_hyper_bias_only():
    rng = np.random.default_rng(4)
    c = random_cohort(rng)
    p = PeerNNParams.init(c.D, 0.5, seed=4)
    h = Hyper(0.0, 0.0, 0.0)
    rep = total_loss(p, c, h, class_ids=c.class_ids)
    assert rep.total == pytest.approx(rep.bias_sq)
    g = gradient(p, c, h, class_ids=c.class_ids)
    assert all(np.all(np.isfinite(a)) for a in g.arrays())


def test_rescale_keeps_omega():
    rng = np.random.default_rng(6)
    p = PeerNNParams.init(4, 0.8, seed=6)
    X = rng.random((6, 4))
    q = rescale(p, 0.25)
    np.testing.assert_allclose(forward(q, X).omega, forward(p, X).omega, atol=1e-12)
    np.testing.assert_allclose(forward(q, X).sigma, 0.25 * forward(p, X).sigma)
    with pytest.raises(ValidationError):
        rescale(p, 0.0)


def test_params_json_roundtrip(tmp_path):
    p = PeerNNParams.init(5, seed=2)
    path = tmp_path / "p.json"
    p.save(path, hyper=Hyper(), seed=2)
    q = PeerNNParams.load(path)
    for a, b in zip(p.arrays(), q.arrays()):
        np.testing.assert_array_equal(a, b)
    d = json.loads(path.read_text())
    assert d["seed"] == 2
    np.testing.assert_array_equal(PeerNNParams.from_flat(p.flat(), like=p).W2, p.W2)


def test_opt_config_validation():
    with pytest.raises(ConfigError):
        OptConfig(step=0.0)
    with pytest.raises(ConfigError):
        OptConfig(epochs=-1)
    assert OptConfig(epochs=5).epochs == 5


def tiny_cohort():
    return random_cohort(np.random.default_rng(11), sizes=(6, 6), D=4)


def test_train_epochs_zero_returns_init():
    c = tiny_cohort()
    init = PeerNNParams.init(c.D, 0.3, seed=0)
    p, hist = train(c, opt=OptConfig(epochs=0), class_ids=c.class_ids, init=init)
    for a, b in zip(p.arrays(), init.arrays()):
        np.testing.assert_array_equal(a, b)
    assert len(hist) == 1


def test_train_decreases_loss_small_step():
    c = tiny_cohort()
    p, hist = train(c, opt=OptConfig(step=1e-3, epochs=500), class_ids=c.class_ids)
    assert len(hist) == 501
    assert hist[-1].total <= hist[0].total


def test_train_full_phase_monotone():
    c = tiny_cohort()
    opt = OptConfig(epochs=120, warmup=60)
    _, hist = train(c, opt=opt, class_ids=c.class_ids)
    full = [h.total for h in hist[opt.warmup + 1:]]
    assert all(b <= a + 1e-12 for a, b in zip(full, full[1:]))


def test_train_deterministic():
    c = tiny_cohort()
    opt = OptConfig(epochs=40, warmup=20)
    p1, _ = train(c, opt=opt, class_ids=c.class_ids)
    p2, _ = train(c, opt=opt, class_ids=c.class_ids)
    np.testing.assert_array_equal(p1.flat(), p2.flat())


def test_train_needs_train_split():
    c = tiny_cohort()
    c.split = {k: "test" for k in c.class_ids}
    with pytest.raises(ValidationError):
        train(c, opt=OptConfig(epochs=1))
