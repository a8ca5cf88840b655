import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_cohort
from peerassign import evalharness as E
from peerassign.cohort import Cohort
from peerassign.errors import NumericError, ValidationError
from peerassign.peernn import PeerNNParams, masked_row_softmax


def test_correspondence_G_cells():
    assert E.correspondence_G(0, 4) == 1
    assert E.correspondence_G(1, 1) == 2.5
    assert E.correspondence_G(4, 5) == 3
    assert E.correspondence_G(2, 3) == 2.5
    with pytest.raises(ValidationError):
        E.correspondence_G(3, 2)
    t = E.g_table()
    assert t.shape == (6, 6) and np.isnan(t[0, 0]) and t[5, 5] == 3


def test_uniform_baseline():
    om = E.uniform_baseline_omega(3)
    np.testing.assert_allclose(np.asarray(om), [[0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0]])
    np.testing.assert_array_equal(np.asarray(E.uniform_baseline_omega(6)), masked_row_softmax(np.zeros((6, 6))))
    with pytest.raises(ValidationError):
        E.uniform_baseline_omega(1)


class FixedRng:
    def __init__(self, picks):
        self.picks = list(picks)

    def choice(self, n, p):
        k = self.picks.pop(0)
        assert p[k] > 0
        self.last_p = p
        return k


def test_sampler_forced_renormalization():
    rng = FixedRng([1, 2])
    v = E.sample_without_replacement([0.0, 0.5, 0.5], 2, rng)
    np.testing.assert_array_equal(v, [0, 1, 1])
    np.testing.assert_array_equal(rng.last_p, [0.0, 0.0, 1.0])


def test_sampler_exhaustion_and_support():
    rng = np.random.default_rng(0)
    v = E.sample_without_replacement([0.0, 0.2, 0.3, 0.5], 3, rng)
    np.testing.assert_array_equal(v, [0, 1, 1, 1])
    with pytest.raises(NumericError):
        E.sample_without_replacement([0.0, 0.0, 1.0], 2, rng)


def test_sampler_first_draw_frequencies():
    p = np.array([0.0, 0.1, 0.4, 0.5])
    counts = np.zeros(4)
    rng2 = np.random.default_rng(2)
    for _ in range(20_000):
        counts += E.sample_without_replacement(p, 1, rng2)
    freq = counts / 20_000
    se = np.sqrt(p * (1 - p) / 20_000)
    assert np.all(np.abs(freq - p) <= 3 * se + 1e-12)


def perfect_classroom():
    """B = N - 1, so every classmate is a friend and the uniform row is exact."""
    rng = np.random.default_rng(3)
    n = 6
    A_s = rng.integers(0, 2, (n, 10))
    B = np.full(n, n - 1)
    om = np.full((n, n), 1.0 / (n - 1))
    np.fill_diagonal(om, 0.0)
    counts = A_s.sum(axis=0)[None, :] - A_s
    A_f = np.array([[E.correspondence_G(c, n - 1) for c in row] for row in counts])
    return om, A_s, A_f, B


def test_prediction_error_perfect_predictor():
    om, A_s, A_f, B = perfect_classroom()
    # G values are integers here (B = 5 has no ambiguous cell)
    assert np.all(A_f == np.rint(A_f))
    n = len(B)
    cohort = Cohort(
        ids=np.arange(1, n + 1), school_id=np.ones(n), class_id=np.ones(n), gender=A_s[:, 0],
        z=np.linspace(0, 1, n), B=B, y=np.zeros(n), controls=np.zeros((n, 4)),
        X=np.column_stack([A_s[:, 0], np.linspace(0, 1, n)]), A_s=A_s, A_f=A_f.astype(int),
    )
    pe = E.trait_errors(om, cohort, 1, R=20, seed=0)
    assert pe.shape == (20, 10)
    np.testing.assert_array_equal(pe, 0.0)


@pytest.fixture
def cohort():
    return random_cohort(np.random.default_rng(5), sizes=(7, 8))


def test_prediction_error_deterministic(cohort):
    om = E.uniform_baseline_omega(7)
    a = E.prediction_error(om, cohort, 1, 0, R=1, seed=9)
    b = E.prediction_error(om, cohort, 1, 0, R=1, seed=9)
    assert np.array_equal(a, b) and a.shape == (1,)
    with pytest.raises(ValidationError):
        E.prediction_error(om, cohort, 1, 10)


def test_prediction_error_support(cohort):
    om = np.zeros((7, 7))
    for i in range(7):
        om[i, (i + 1) % 7] = 1.0
    cohort.B[cohort.rows(1)] = 1
    cohort.B[cohort.rows(1)[0]] = 2
    with pytest.raises(NumericError, match="rows \\[0\\]"):
        E.trait_errors(om, cohort, 1, R=2)


def test_trait_errors_order_invariant_in_distribution(cohort):
    # permuting students permutes rows of omega; totals keep their distribution
    r = cohort.rows(1)
    rng = np.random.default_rng(6)
    om = masked_row_softmax(rng.normal(size=(len(r), len(r))))
    a = E.trait_errors(om, cohort, 1, R=4000, seed=1).mean(axis=0)
    perm = rng.permutation(len(r))
    sub = cohort.take(r[perm])
    b = E.trait_errors(om[np.ix_(perm, perm)], sub, 1, R=4000, seed=2).mean(axis=0)
    np.testing.assert_allclose(a, b, rtol=0.05, atol=0.05)


def test_evaluate_and_report(cohort, tmp_path):
    p = PeerNNParams.init(cohort.D, seed=1)
    rep = E.evaluate(p, cohort, class_ids=cohort.class_ids, R=30, seed=4)
    assert rep.peernn.shape == (30, 10) and np.all(rep.peernn >= 0) and np.all(rep.uniform >= 0)
    rev = E.evaluate(p, cohort, class_ids=cohort.class_ids[::-1], R=30, seed=4)
    np.testing.assert_allclose(rev.peernn, rep.peernn)
    assert len(rep.summary()) == 10
    path = tmp_path / "te.csv"
    rep.write_csv(path, header_comment="seed=4")
    lines = path.read_text().splitlines()
    assert lines[0] == "# seed=4" and lines[1] == "trait,replicate,model,pe"
    assert len(lines) == 2 + 2 * 10 * 30


def test_diagnostics():
    d = E.omega_diagnostics(E.uniform_baseline_omega(5), [0, 1, 0, 1, 0])
    assert d.centrality == pytest.approx(1.0) and d.dispersion == pytest.approx(0.0, abs=1e-15)
    block = np.array([[0, 1, 0, 0], [1, 0, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=float)
    assert E.omega_diagnostics(block, [0, 0, 1, 1]).homophily == 1.0
    assert E.omega_diagnostics(block, [1, 1, 1, 1]).homophily is None
    assert E.omega_diagnostics(block, [0, 0, 1, 1]).density["max"] == 1.0


def test_q_matrix_examples():
    q = E.q_matrix([[0, 1], [1, 0]], [0.2, 0.8])
    assert q[0, 1] == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_array_equal(E.q_matrix(E.uniform_baseline_omega(4), np.full(4, 0.3)), 0.0)
    with pytest.raises(ValidationError):
        E.q_matrix(np.zeros((3, 3)), np.zeros(2))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8).flatmap(lambda n: st.tuples(
    arrays(np.float64, (n, n), elements=st.floats(-5, 5)), arrays(np.float64, n, elements=st.floats(0, 1)))))
def test_q_matrix_symmetric(args):
    u, z = args
    q = E.q_matrix(masked_row_softmax(u), z)
    assert np.max(np.abs(q - q.T)) <= 1e-12
    assert np.all(np.diag(q) == 0)


def test_quantiles_type7():
    assert E.quantiles([1, 2, 3, 4], (0.25, 0.5, 0.75)) == [1.75, 2.5, 3.25]


def test_heatmap_two_by_two(tmp_path):
    m = np.array([[0.0, 1.0], [0.25, 0.5]])
    csv_path, pgm_path = E.export_heatmap(m, tmp_path / "h", comment="seed=1")
    img, maxval = E.read_pgm(pgm_path)
    assert maxval == 255 and img.shape == (2, 2)
    np.testing.assert_array_equal(img, [[255, 0], [191, 128]])
    head = pgm_path.read_text().splitlines()[:3]
    assert head[0] == "P2" and "inverted" in head[1] and head[2] == "# seed=1"
    np.testing.assert_allclose(E.read_matrix_csv(csv_path), m, atol=1e-12)


def test_heatmap_constant(tmp_path):
    _, pgm = E.export_heatmap(np.full((3, 4), 0.7), tmp_path / "c.pgm")
    img, _ = E.read_pgm(pgm)
    assert img.shape == (3, 4) and np.all(img == 128)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-1e6, 1e6)))
def test_heatmap_csv_roundtrip(tmp_path_factory, m):
    d = tmp_path_factory.mktemp("rt")
    csv_path, _ = E.export_heatmap(m, d / "m")
    np.testing.assert_allclose(E.read_matrix_csv(csv_path), m, atol=1e-12, rtol=0)


def test_heatmap_rejects_nan(tmp_path):
    with pytest.raises(ValidationError):
        E.export_heatmap(np.array([[np.nan]]), tmp_path / "x")
