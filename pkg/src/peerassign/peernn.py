"""Friendship-formation network.

A student's latent profile is ``sigma = relu(X W0)``; preferences are
``delta = relu(relu(sigma W1) W2)``; the systematic utility of i naming j is
``upsilon[i, j] = delta[i] . sigma[j]`` and the friendship-probability matrix
``omega`` is its row softmax over classmates (diagonal excluded).

The network is fitted to aggregated survey answers through a closed-form
bias/variance surrogate of the prediction MSE, plus homophily and
transitivity penalties. Gradients are derived by hand below.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from peerassign.errors import (
    ConfigError,
    NumericError,
    SingularityError,
    StageError,
    TrainingError,
    ValidationError,
)

K_LATENT = 10
H_HIDDEN = 10
N_QUESTIONS = 10

# Linear fits to the survey-answer correspondence, indexed by B - 1.
G_INTERCEPT = (1.0, 1.090, 1.154, 1.2, 1.333)
G_SLOPE = (1.5, 0.727, 0.654, 0.5, 0.4)


@dataclass
class PeerNNParams:
    W0: np.ndarray
    W1: np.ndarray
    W2: np.ndarray

    def __post_init__(self):
        self.W0 = np.asarray(self.W0, dtype=np.float64)
        self.W1 = np.asarray(self.W1, dtype=np.float64)
        self.W2 = np.asarray(self.W2, dtype=np.float64)
        K = self.W0.shape[1]
        if self.W1.shape[0] != K or self.W2.shape != (self.W1.shape[1], K):
            raise ValidationError(
                f"inconsistent shapes W0{self.W0.shape} W1{self.W1.shape} W2{self.W2.shape}"
            )
        for name in ("W0", "W1", "W2"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericError(f"non-finite entries in {name}")

    @property
    def D(self):
        return self.W0.shape[0]

    @property
    def K(self):
        return self.W0.shape[1]

    @property
    def H(self):
        return self.W1.shape[1]

    @classmethod
    def init(cls, D, scale=0.3, seed=0, K=K_LATENT, H=H_HIDDEN):
        rng = np.random.default_rng(seed)
        return cls(
            rng.uniform(-scale, scale, size=(D, K)),
            rng.uniform(-scale, scale, size=(K, H)),
            rng.uniform(-scale, scale, size=(H, K)),
        )

    @classmethod
    def zeros_like(cls, other):
        return cls(np.zeros_like(other.W0), np.zeros_like(other.W1), np.zeros_like(other.W2))

    def arrays(self):
        return self.W0, self.W1, self.W2

    def flat(self):
        return np.concatenate([w.ravel() for w in self.arrays()])

    @classmethod
    def from_flat(cls, v, like):
        v = np.asarray(v, dtype=np.float64)
        out, k = [], 0
        for w in like.arrays():
            out.append(v[k:k + w.size].reshape(w.shape))
            k += w.size
        return cls(*out)

    def copy(self):
        return PeerNNParams(self.W0.copy(), self.W1.copy(), self.W2.copy())

    def to_json(self, hyper=None, seed=None):
        d = {
            "D": self.D, "K": self.K, "H": self.H,
            "W0": self.W0.tolist(), "W1": self.W1.tolist(), "W2": self.W2.tolist(),
        }
        if hyper is not None:
            d["hyper"] = {"mu": hyper.mu, "kappa": hyper.kappa, "lambda": hyper.lam}
        if seed is not None:
            d["seed"] = seed
        return d

    @classmethod
    def from_json(cls, d):
        p = cls(d["W0"], d["W1"], d["W2"])
        if (p.D, p.K, p.H) != (d.get("D", p.D), d.get("K", p.K), d.get("H", p.H)):
            raise ValidationError("declared dimensions do not match weight shapes")
        return p

    def save(self, path, hyper=None, seed=None, meta=None):
        d = self.to_json(hyper, seed)
        if meta:
            d["meta"] = meta
        try:
            Path(path).write_text(json.dumps(d, sort_keys=True) + "\n", encoding="utf-8")
        except OSError as exc:
            raise StageError(f"cannot write parameters to {path}: {exc}") from exc

    @classmethod
    def load(cls, path):
        try:
            return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
        except OSError as exc:
            raise StageError(f"cannot read parameters {path}: {exc}") from exc


@dataclass(frozen=True)
class Hyper:
    mu: float = 0.2
    kappa: float = 0.3
    lam: float = 0.3


@dataclass
class LossReport:
    bias_sq: float
    var: float
    homophily: float
    transitivity: float
    total: float
    hyper: Hyper = field(default_factory=Hyper)

    @classmethod
    def combine(cls, bias_sq, var, homophily, transitivity, hyper):
        total = bias_sq + hyper.mu * var + hyper.kappa * homophily + hyper.lam * transitivity
        return cls(bias_sq, var, homophily, transitivity, total, hyper)


@dataclass
class OmegaMatrix:
    """Friendship-probability matrix of one classroom."""

    values: np.ndarray
    class_id: int | None = None
    student_ids: tuple | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        check_omega(self.values)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    @property
    def N(self):
        return self.values.shape[0]


def check_omega(om, tol=1e-9):
    om = np.asarray(om)
    if om.ndim != 2 or om.shape[0] != om.shape[1]:
        raise ValidationError(f"omega must be square, got shape {om.shape}")
    if np.any(np.diag(om) != 0):
        raise ValidationError("omega diagonal must be exactly zero")
    if np.any(om < 0) or np.any(om > 1):
        raise ValidationError("omega entries must lie in [0, 1]")
    if np.any(np.abs(om.sum(axis=1) - 1) > tol):
        raise ValidationError("omega rows must sum to one")


def _relu(a):
    return np.maximum(a, 0.0)


def masked_row_softmax(upsilon):
    """Row softmax over off-diagonal entries; the diagonal is exactly zero."""
    u = np.asarray(upsilon, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] != u.shape[1]:
        raise ValidationError(f"upsilon must be square, got {u.shape}")
    n = u.shape[0]
    if n < 2:
        raise ValidationError("softmax needs at least two students")
    off = ~np.eye(n, dtype=bool)
    if not np.all(np.isfinite(u[off])):
        raise NumericError("non-finite utility in softmax")
    m = np.max(np.where(off, u, -np.inf), axis=1)
    x = u - m[:, None]
    x[~off] = 0.0
    e = np.exp(x)
    e[~off] = 0.0
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class Forward:
    sigma: np.ndarray
    delta: np.ndarray
    upsilon: np.ndarray
    omega: np.ndarray
    # pre-activations kept for the backward pass
    pre0: np.ndarray
    pre1: np.ndarray
    hidden: np.ndarray
    pre2: np.ndarray


def forward(params, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.D:
        raise ValidationError(f"X has shape {X.shape}, parameters expect {params.D} features")
    if not np.all(np.isfinite(X)):
        raise NumericError("non-finite features")
    pre0 = X @ params.W0
    sigma = _relu(pre0)
    pre1 = sigma @ params.W1
    hidden = _relu(pre1)
    pre2 = hidden @ params.W2
    delta = _relu(pre2)
    upsilon = delta @ sigma.T
    if not np.all(np.isfinite(upsilon)):
        raise NumericError("non-finite utility in forward pass")
    omega = masked_row_softmax(upsilon)
    return Forward(sigma, delta, upsilon, omega, pre0, pre1, hidden, pre2)


def predict_omega(params, X, class_id=None, student_ids=None):
    om = forward(params, X).omega
    return OmegaMatrix(om, class_id, None if student_ids is None else tuple(student_ids))


def g_approx(vdota, B):
    """Linear surrogate of the expected survey answer given trait count and B."""
    B = np.asarray(B)
    if np.any((B < 1) | (B > 5)):
        raise ValidationError(f"B must lie in 1..5, got {B}")
    return np.asarray(G_INTERCEPT)[B - 1] + np.asarray(G_SLOPE)[B - 1] * vdota


def multinomial_covariance(omega_row, B):
    """Covariance of friend-count vector for B draws with replacement."""
    p = np.asarray(omega_row, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
        raise ValidationError("omega_row must be a probability vector")
    return B * (np.diag(p) - np.outer(p, p))


def _check_terms(omega, A_s, A_f, B):
    om = np.asarray(omega, dtype=np.float64)
    A_s = np.asarray(A_s, dtype=np.float64)
    B = np.asarray(B, dtype=np.int64)
    n = om.shape[0]
    if om.shape != (n, n) or A_s.shape[0] != n or B.shape != (n,):
        raise ValidationError("omega, A_s and B disagree on the number of students")
    if A_f is not None:
        A_f = np.asarray(A_f, dtype=np.float64)
        if A_f.shape != A_s.shape:
            raise ValidationError(f"A_f shape {A_f.shape} != A_s shape {A_s.shape}")
    if np.any((B < 1) | (B > 5)):
        raise ValidationError("B must lie in 1..5")
    return om, A_s, A_f, B


def loss_bias_sq(omega, A_s, A_f, B):
    om, A_s, A_f, B = _check_terms(omega, A_s, A_f, B)
    n, q = A_s.shape
    a = np.asarray(G_SLOPE)[B - 1]
    b = np.asarray(G_INTERCEPT)[B - 1]
    # expected trait count among B draws is B * (omega_i . A_s)
    resid = (a * B)[:, None] * (om @ A_s) + b[:, None] - A_f
    return float(np.sum(resid * resid) / (n * q))


def loss_variance(omega, A_s, B):
    om, A_s, _, B = _check_terms(omega, A_s, None, B)
    n, q = A_s.shape
    a = np.asarray(G_SLOPE)[B - 1]
    # tr(A' (diag(w) - w w') A) = w . rownorm2(A) - |A' w|^2
    sq = np.sum(A_s * A_s, axis=1)
    M = om @ A_s
    per = om @ sq - np.sum(M * M, axis=1)
    return float(np.sum(a * a * B * per) / (n * q))


def homophily_penalty(omega, sigma):
    om = np.asarray(omega, dtype=np.float64)
    s = np.asarray(sigma, dtype=np.float64)
    if om.shape[0] != s.shape[0]:
        raise ValidationError("omega and sigma disagree on the number of students")
    r = om @ s - s
    return float(np.sum(r * r))


def _transitivity_parts(om):
    n = om.shape[0]
    if n < 3:
        raise ValidationError("transitivity penalty needs N >= 3")
    P = om @ om
    d = np.diag(P).copy()
    if np.any(d >= 1 - 1e-9):
        raise SingularityError("diag(omega @ omega) reaches 1; renormalization undefined")
    Z = P / (1.0 - d)[:, None]
    np.fill_diagonal(Z, 0.0)
    return P, d, Z, om - Z


def transitivity_penalty(omega):
    om = np.asarray(omega, dtype=np.float64)
    *_, R = _transitivity_parts(om)
    return float(np.sum(R * R))


# -- per-classroom loss and gradient -----------------------------------------

@dataclass
class _Cache:
    omega: np.ndarray
    sigma: np.ndarray
    mean_slope: np.ndarray
    M: np.ndarray
    resid: np.ndarray
    sq: np.ndarray
    wv: np.ndarray
    nq: int
    hres: np.ndarray
    d: np.ndarray
    Z: np.ndarray
    tres: np.ndarray
    A_s: np.ndarray


def _classroom_terms(params, X, A_s, A_f, B):
    """Loss components (bias^2, var, H, T) of one classroom plus backward cache."""
    fw = forward(params, X)
    om, sig = fw.omega, fw.sigma
    A_s = np.asarray(A_s, dtype=np.float64)
    A_f = np.asarray(A_f, dtype=np.float64)
    B = np.asarray(B, dtype=np.int64)
    n, q = A_s.shape
    nq = n * q
    slope = np.asarray(G_SLOPE)[B - 1]
    icpt = np.asarray(G_INTERCEPT)[B - 1]

    M = om @ A_s
    resid = (slope * B)[:, None] * M + icpt[:, None] - A_f
    bias_sq = np.sum(resid * resid) / nq

    sq = np.sum(A_s * A_s, axis=1)
    wv = slope * slope * B
    var = np.sum(wv * (om @ sq - np.sum(M * M, axis=1))) / nq

    hres = om @ sig - sig
    homo = np.sum(hres * hres)

    _, d, Z, tres = _transitivity_parts(om)
    trans = np.sum(tres * tres)

    values = np.array([bias_sq, var, homo, trans])
    if not np.all(np.isfinite(values)):
        raise NumericError("non-finite loss component")
    return values, fw, _Cache(om, sig, slope * B, M, resid, sq, wv, nq, hres, d, Z, tres, A_s)


def _classroom_backward(params, X, fw, c, weights):
    """Reverse pass for one classroom; `weights` = (1, mu, kappa, lambda)."""
    w_b, w_v, w_h, w_t = weights
    om, sig = c.omega, c.sigma
    n = om.shape[0]

    g_om = (2.0 * w_b / c.nq) * ((c.mean_slope[:, None] * c.resid) @ c.A_s.T)
    g_om += (w_v / c.nq) * c.wv[:, None] * (c.sq[None, :] - 2.0 * (c.M @ c.A_s.T))
    g_om += 2.0 * w_h * (c.hres @ sig.T)
    g_sig = 2.0 * w_h * ((om - np.eye(n)).T @ c.hres)

    # transitivity: Z = offdiag(P) / (1 - diag(P)),  P = omega omega
    g_om += 2.0 * w_t * c.tres
    gZ = -2.0 * w_t * c.tres
    inv = 1.0 / (1.0 - c.d)
    gP = gZ * inv[:, None]
    gP[np.diag_indices(n)] = np.sum(gZ * c.Z, axis=1) * inv
    g_om += gP @ om.T + om.T @ gP

    # masked softmax
    g_u = om * (g_om - np.sum(om * g_om, axis=1, keepdims=True))
    np.fill_diagonal(g_u, 0.0)

    # upsilon = delta sigma'
    g_delta = g_u @ sig
    g_sig += g_u.T @ fw.delta

    g_pre2 = g_delta * (fw.pre2 > 0)
    dW2 = fw.hidden.T @ g_pre2
    g_pre1 = (g_pre2 @ params.W2.T) * (fw.pre1 > 0)
    dW1 = sig.T @ g_pre1
    g_sig += g_pre1 @ params.W1.T
    g_pre0 = g_sig * (fw.pre0 > 0)
    dW0 = np.asarray(X, dtype=np.float64).T @ g_pre0

    for stage, g in (("delta", g_delta), ("sigma", g_sig), ("W0", dW0), ("W1", dW1), ("W2", dW2)):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient at {stage}")
    return dW0, dW1, dW2


def _classes(cohort, class_ids):
    ids = cohort.class_ids if class_ids is None else list(class_ids)
    for c in ids:
        if len(cohort.rows(c)) < 3:
            raise ValidationError(f"classroom {c} has fewer than 3 students")
    return ids


def _evaluate(params, cohort, hyper, class_ids, need_grad):
    weights = (1.0, hyper.mu, hyper.kappa, hyper.lam)
    totals = np.zeros(4)
    grads = [np.zeros_like(w) for w in params.arrays()] if need_grad else None
    # fixed classroom order keeps the reduction bitwise reproducible
    for c in _classes(cohort, class_ids):
        r = cohort.rows(c)
        X = cohort.X[r]
        values, fw, cache = _classroom_terms(params, X, cohort.A_s[r], cohort.A_f[r], cohort.B[r])
        totals += values
        if need_grad:
            for acc, g in zip(grads, _classroom_backward(params, X, fw, cache, weights)):
                acc += g
    report = LossReport.combine(*(float(v) for v in totals), hyper)
    return report, (PeerNNParams(*grads) if need_grad else None)


def total_loss(params, cohort, hyper=Hyper(), class_ids=None):
    """Loss summed over classrooms (all of `cohort`'s unless `class_ids` given)."""
    return _evaluate(params, cohort, hyper, class_ids, need_grad=False)[0]


def loss_and_gradient(params, cohort, hyper=Hyper(), class_ids=None):
    return _evaluate(params, cohort, hyper, class_ids, need_grad=True)


def gradient(params, cohort, hyper=Hyper(), class_ids=None):
    return _evaluate(params, cohort, hyper, class_ids, need_grad=True)[1]


# -- training -----------------------------------------------------------------

@dataclass(frozen=True)
class OptConfig:
    """Optimizer settings.

    `step` is the initial step on the per-classroom mean gradient; every
    update backtracks (halving) until the objective does not increase and
    the step then grows by 1.2. The first `warmup` updates use kappa = 0,
    the remaining ``epochs - warmup`` the full loss (warmup is capped at
    epochs). `max_halvings` bounds the symmetry rescale applied
    between the two phases.
    """

    step: float = 1.5
    epochs: int = 400
    warmup: int = 300
    seed: int = 0
    init_scale: float = 0.3
    max_halvings: int = 5

    def __post_init__(self):
        if self.step <= 0 or self.epochs < 0 or self.init_scale < 0:
            raise ConfigError("step must be > 0, epochs and init_scale >= 0")
        if self.warmup < 0:
            raise ConfigError("warmup must be >= 0")
        if self.max_halvings < 0:
            raise ConfigError("max_halvings must be >= 0")


def rescale(params, c):
    """Scale W0 by c and W2 by 1/c**2. Leaves upsilon, hence omega, unchanged
    (relu is positively homogeneous) while sigma shrinks by c."""
    if c <= 0:
        raise ValidationError("rescale factor must be positive")
    return PeerNNParams(params.W0 * c, params.W1.copy(), params.W2 / (c * c))


def _reweigh(report, hyper):
    return LossReport.combine(report.bias_sq, report.var, report.homophily, report.transitivity, hyper)


def _checked(fn, epoch, *args):
    try:
        out = fn(*args)
    except NumericError as exc:
        raise TrainingError(f"training diverged at epoch {epoch}: {exc}") from exc
    rep = out[0] if isinstance(out, tuple) else out
    if not np.isfinite(rep.total):
        raise TrainingError(f"training diverged at epoch {epoch}: total loss {rep.total}")
    return out


def train(cohort, hyper=Hyper(), opt=OptConfig(), class_ids=None, init=None, log_every=0, logger=None):
    """Fit PeerNN parameters by full-batch gradient descent.

    The homophily penalty is minimised trivially by dead relus (sigma = 0,
    uniform omega), and plain descent from a small init falls into that
    state. Training therefore warms up with kappa = 0, applies the
    omega-preserving rescale that minimises the full loss, then descends
    the full loss with backtracking so it never increases.

    Uses the train-split classrooms unless `class_ids` is given. Returns
    ``(params, history)``: ``history[k]`` is the full loss (under `hyper`)
    before update k, the last entry is the loss of the returned params.
    """
    if class_ids is None:
        class_ids = cohort.classes_in_split("train")
        if not class_ids:
            raise ValidationError("cohort has no train-split classrooms")
    params = init.copy() if init is not None else PeerNNParams.init(cohort.D, opt.init_scale, opt.seed)
    warm_hyper = Hyper(hyper.mu, 0.0, hyper.lam)
    scale = 1.0 / len(class_ids)
    history = []
    warmup = min(opt.warmup, opt.epochs)
    params, step = _descend(params, cohort, warm_hyper, hyper, class_ids, opt.step * scale, 0, warmup,
                            history, log_every, logger)
    if hyper.kappa > 0 and opt.epochs > warmup:
        best_total, best_c = _checked(total_loss, warmup, params, cohort, hyper, class_ids).total, 1.0
        for k in range(1, opt.max_halvings + 1):
            c = 0.5**k
            rep = _checked(total_loss, warmup, rescale(params, c), cohort, hyper, class_ids)
            if rep.total < best_total:
                best_total, best_c = rep.total, c
        if best_c != 1.0:
            params = rescale(params, best_c)
            step = opt.step * scale
    params, _ = _descend(params, cohort, hyper, hyper, class_ids, step, warmup, opt.epochs,
                         history, log_every, logger)
    history.append(_checked(total_loss, opt.epochs, params, cohort, hyper, class_ids))
    return params, history


def _descend(params, cohort, hyper, report_hyper, class_ids, step, start, stop, history, log_every, logger):
    """Backtracking gradient descent on `hyper`; appends losses under `report_hyper`."""
    if start >= stop:
        return params, step
    report, g = _checked(loss_and_gradient, start, params, cohort, hyper, class_ids)
    for epoch in range(start, stop):
        history.append(_reweigh(report, report_hyper))
        if logger is not None and log_every and epoch % log_every == 0:
            logger.info("epoch %d total %.6f", epoch, history[-1].total)
        for _ in range(60):
            cand = PeerNNParams(params.W0 - step * g.W0, params.W1 - step * g.W1, params.W2 - step * g.W2)
            try:
                rep = total_loss(cand, cohort, hyper, class_ids)
            except NumericError:
                rep = None
            if rep is not None and np.isfinite(rep.total) and rep.total <= report.total:
                break
            step *= 0.5
        else:
            # stationary at machine precision: the remaining updates are no-ops
            history.extend([history[-1]] * (stop - epoch - 1))
            break
        params = cand
        report, g = _checked(loss_and_gradient, epoch, params, cohort, hyper, class_ids)
        step *= 1.2
    return params, step
