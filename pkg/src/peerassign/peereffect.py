"""Peer-effect regressions.

Two peer regressors per student:

* friendship-weighted mean of classmates' 6th-grade quantile, ``omega @ z``
  (endogenous: friendships are chosen);
* leave-one-out classmate mean of the same quantile (exogenous under random
  classroom assignment), used directly in the linear-in-means model and as
  the excluded instrument for the friendship-weighted one.

Every specification carries school dummies; the random-effects variants add
a Gaussian classroom intercept estimated by profile maximum likelihood.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg
from scipy.optimize import minimize_scalar

from peerassign.errors import EstimationError, RankError, ValidationError, WeakInstrumentError

CONTROL_LABELS = ("own_rank", "age", "sex", "f_edu", "m_edu", "ethnic")
LOG_PSI_BOUNDS = (-12.0, 12.0)


@dataclass
class RegressionDesign:
    y: np.ndarray
    endog: np.ndarray
    instrument: np.ndarray
    controls: np.ndarray
    control_names: tuple
    school_dummies: np.ndarray
    dummy_names: tuple
    groups: np.ndarray
    ids: np.ndarray

    @property
    def n(self):
        return len(self.y)

    def exog(self):
        """Intercept, controls and school dummies, with column names."""
        X = np.column_stack([np.ones(self.n), self.controls, self.school_dummies])
        return X, ("const", *self.control_names, *self.dummy_names)


def leave_one_out_mean(z):
    z = np.asarray(z, dtype=np.float64)
    n = len(z)
    if n < 2:
        raise ValidationError("leave-one-out mean needs at least two students")
    return (z.sum() - z) / (n - 1)


def build_design(cohort, omegas, class_ids=None):
    """Assemble the regression design for the given classrooms.

    `omegas` maps class id to that classroom's friendship matrix (rows in
    the cohort's student order).
    """
    class_ids = cohort.class_ids if class_ids is None else list(class_ids)
    rows, endog, inst = [], [], []
    for c in class_ids:
        if c not in omegas:
            raise ValidationError(f"no friendship matrix for classroom {c}")
        r = cohort.rows(c)
        om = np.asarray(omegas[c], dtype=np.float64)
        if om.shape != (len(r), len(r)):
            raise ValidationError(f"classroom {c}: omega shape {om.shape} != ({len(r)}, {len(r)})")
        z = cohort.z[r]
        rows.append(r)
        endog.append(om @ z)
        inst.append(leave_one_out_mean(z))
    rows = np.concatenate(rows)

    controls = np.column_stack([cohort.z[rows], cohort.controls[rows, 0], cohort.gender[rows], cohort.controls[rows, 1:]])
    schools = cohort.school_id[rows]
    levels = []
    for s in schools.tolist():
        if s not in levels:
            levels.append(s)
    dummies = np.column_stack([(schools == s).astype(np.float64) for s in levels[1:]]) if len(levels) > 1 else np.zeros((len(rows), 0))
    _, groups = np.unique(cohort.class_id[rows], return_inverse=True)
    return RegressionDesign(
        y=cohort.y[rows].astype(np.float64),
        endog=np.concatenate(endog),
        instrument=np.concatenate(inst),
        controls=controls,
        control_names=CONTROL_LABELS,
        school_dummies=dummies,
        dummy_names=tuple(f"school_{s}" for s in levels[1:]),
        groups=groups,
        ids=cohort.ids[rows],
    )


# -- least squares ------------------------------------------------------------

@dataclass
class OLSResult:
    coef: np.ndarray
    se: np.ndarray
    resid: np.ndarray
    sigma2: float
    adj_r2: float
    cov: np.ndarray
    names: tuple

    def __getitem__(self, name):
        return self.coef[self.names.index(name)]


def _qr_solve(X, names):
    """Pivoted QR; returns (Q, R, piv) after checking full column rank."""
    n, k = X.shape
    if n < k:
        raise RankError(f"{n} observations for {k} regressors")
    Q, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(n, k) * np.finfo(float).eps * (diag[0] if k else 0.0) * 1e3
    rank = int(np.sum(diag > tol))
    if rank < k:
        bad = [names[j] for j in piv[rank:]]
        raise RankError(f"design is rank deficient ({rank} < {k}); collinear columns: {bad}")
    return Q, R, piv


def _unpivot(v, piv):
    out = np.empty_like(v)
    out[piv] = v
    return out


def _inv_rtr(R, piv):
    """(X'X)^-1 from the pivoted R factor, in original column order."""
    Rinv = linalg.solve_triangular(R, np.eye(R.shape[0]))
    Ainv = Rinv @ Rinv.T
    k = len(piv)
    out = np.empty((k, k))
    out[np.ix_(piv, piv)] = Ainv
    return out


def _adj_r2(y, resid, k):
    n = len(y)
    tss = np.sum((y - y.mean()) ** 2)
    if n - k <= 0 or tss == 0:
        return float("nan")
    return float(1 - (resid @ resid / (n - k)) / (tss / (n - 1)))


def ols(y, X, names=None):
    """Least squares via pivoted QR with classical homoskedastic SEs."""
    y = np.asarray(y, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n, k = X.shape
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(k))
    Q, R, piv = _qr_solve(X, names)
    coef = _unpivot(linalg.solve_triangular(R, Q.T @ y), piv)
    resid = y - X @ coef
    dof = n - k
    sigma2 = float(resid @ resid / dof) if dof > 0 else float("nan")
    cov = sigma2 * _inv_rtr(R, piv)
    return OLSResult(coef, np.sqrt(np.maximum(np.diag(cov), 0.0)), resid, sigma2, _adj_r2(y, resid, k), cov, names)


# -- random-effects profile likelihood ---------------------------------------

@dataclass
class REFit:
    coef: np.ndarray
    se: np.ndarray
    cov: np.ndarray
    sigma2_eps: float
    sigma2_mu: float
    loglik: float
    log_psi: float


def _group_means(a, groups, sizes):
    sums = np.zeros((len(sizes),) + a.shape[1:])
    np.add.at(sums, groups, a)
    return sums / sizes.reshape((-1,) + (1,) * (a.ndim - 1))


class _Profile:
    """Gaussian random-intercept likelihood profiled over psi = var_mu / var_eps."""

    def __init__(self, y, X, groups, names):
        self.y, self.X, self.groups, self.names = y, X, groups, names
        self.sizes = np.bincount(groups).astype(np.float64)
        self.ybar = _group_means(y, groups, self.sizes)
        self.Xbar = _group_means(X, groups, self.sizes)
        self.n = len(y)

    def fit(self, log_psi):
        psi = math.exp(log_psi)
        lam = 1.0 - 1.0 / np.sqrt(1.0 + self.sizes * psi)
        ys = self.y - lam[self.groups] * self.ybar[self.groups]
        Xs = self.X - lam[self.groups, None] * self.Xbar[self.groups]
        Q, R, piv = _qr_solve(Xs, self.names)
        coef = _unpivot(linalg.solve_triangular(R, Q.T @ ys), piv)
        r = ys - Xs @ coef
        s2 = max(float(r @ r) / self.n, 1e-300)
        ll = -0.5 * self.n * (math.log(2 * math.pi) + math.log(s2) + 1.0) - 0.5 * float(np.sum(np.log1p(self.sizes * psi)))
        return ll, coef, s2, (R, piv)

    def loglik(self, log_psi):
        return self.fit(log_psi)[0]


def re_mle(y, X, groups, names=None, tol=1e-8):
    """Random classroom intercept by profile ML over log psi in [-12, 12]."""
    y = np.asarray(y, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(X.shape[1]))
    prof = _Profile(y, X, np.asarray(groups), names)
    lo, hi = LOG_PSI_BOUNDS
    grid = np.linspace(lo, hi, 49)
    lls = np.array([prof.loglik(t) for t in grid])
    if not np.all(np.isfinite(lls)):
        raise EstimationError("non-finite log-likelihood on the variance-ratio grid")
    j = int(np.argmax(lls))
    a, b = grid[max(j - 1, 0)], grid[min(j + 1, len(grid) - 1)]
    res = minimize_scalar(lambda t: -prof.loglik(t), bounds=(a, b), method="bounded",
                          options={"xatol": 1e-10, "maxiter": 500})
    if not res.success or not np.isfinite(res.fun):
        raise EstimationError(f"variance-ratio search did not converge: {res.message}")
    best_t = float(res.x) if -res.fun >= lls[j] else float(grid[j])
    ll, coef, s2, (R, piv) = prof.fit(best_t)
    # the refined optimum must not be beaten by its bracketing grid points
    if ll + tol < max(lls[max(j - 1, 0)], lls[min(j + 1, len(grid) - 1)]):
        raise EstimationError("variance-ratio search left a better bracketing point")
    cov = s2 * _inv_rtr(R, piv)
    return REFit(coef, np.sqrt(np.maximum(np.diag(cov), 0.0)), cov, s2, math.exp(best_t) * s2, ll, best_t)


# -- estimators ---------------------------------------------------------------

@dataclass
class FirstStage:
    fitted: np.ndarray
    pi1: float
    se: float
    F: float
    adj_r2: float
    result: OLSResult


def first_stage(design):
    X0, names = design.exog()
    Z = np.column_stack([design.instrument, X0])
    res = ols(design.endog, Z, ("instrument", *names))
    pi1, se = float(res.coef[0]), float(res.se[0])
    F = (pi1 / se) ** 2 if se > 0 else float("inf")
    return FirstStage(Z @ res.coef, pi1, se, F, res.adj_r2, res)


@dataclass
class IVEstimate:
    beta: float
    se_beta: float
    gamma: dict
    method: str
    n: int
    first_stage_pi1: float | None = None
    first_stage_se: float | None = None
    first_stage_F: float | None = None
    first_stage_adj_r2: float | None = None
    sigma2_mu: float = 0.0
    sigma2_eps: float = 0.0
    loglik: float | None = None
    adj_r2: float | None = None
    coef: dict = field(default_factory=dict)
    se: dict = field(default_factory=dict)

    def to_json(self):
        return asdict(self)


def _estimate(y, X, names, groups, method, with_re, resid_X=None):
    if with_re:
        fit = re_mle(y, X, groups, names)
        coef, se = fit.coef, fit.se
        s2e, s2m, ll, adj = fit.sigma2_eps, fit.sigma2_mu, fit.loglik, None
    else:
        res = ols(y, X, names)
        coef, se, s2e, s2m, ll, adj = res.coef, res.se, res.sigma2, 0.0, None, res.adj_r2
        if resid_X is not None:
            # 2SLS: residuals use the original endogenous regressor
            u = y - resid_X @ coef
            n, k = X.shape
            s2e = float(u @ u / (n - k))
            _, R, piv = _qr_solve(X, names)
            se = np.sqrt(np.maximum(np.diag(s2e * _inv_rtr(R, piv)), 0.0))
            adj = _adj_r2(y, u, k)
    if not np.isfinite(coef).all():
        raise EstimationError("non-finite coefficient estimate")
    coefs = dict(zip(names, (float(c) for c in coef)))
    ses = dict(zip(names, (float(s) for s in se)))
    gamma = {k: coefs[k] for k in names[2:] if not k.startswith("school_")}
    return IVEstimate(
        beta=float(coef[0]), se_beta=float(se[0]), gamma=gamma, method=method, n=len(y),
        sigma2_mu=float(s2m), sigma2_eps=float(s2e), loglik=ll, adj_r2=adj, coef=coefs, se=ses,
    )


def two_stage_iv(design, with_random_effect=False, min_F=1.0):
    """Friendship-weighted peer effect, instrumented by the leave-one-out mean."""
    fs = first_stage(design)
    if not fs.F >= min_F:
        raise WeakInstrumentError(f"first-stage F = {fs.F:.3g} below {min_F}")
    X0, names = design.exog()
    Xhat = np.column_stack([fs.fitted, X0])
    Xorig = np.column_stack([design.endog, X0])
    est = _estimate(
        design.y, Xhat, ("peer", *names), design.groups,
        "2SLS+RE" if with_random_effect else "2SLS", with_random_effect,
        resid_X=None if with_random_effect else Xorig,
    )
    est.first_stage_pi1, est.first_stage_se = fs.pi1, fs.se
    est.first_stage_F, est.first_stage_adj_r2 = fs.F, fs.adj_r2
    return est


def linear_in_means(design, with_random_effect=False):
    X0, names = design.exog()
    X = np.column_stack([design.instrument, X0])
    return _estimate(design.y, X, ("peer", *names), design.groups,
                     "OLS+RE" if with_random_effect else "OLS", with_random_effect)


def friendship_ols(design):
    """Naive OLS on the friendship-weighted regressor (ignores endogeneity)."""
    X0, names = design.exog()
    X = np.column_stack([design.endog, X0])
    return _estimate(design.y, X, ("peer", *names), design.groups, "OLS", False)


def second_stage_residuals(design, est):
    X0, _ = design.exog()
    X = np.column_stack([design.endog, X0])
    names = ("peer", *design.exog()[1])
    return design.y - X @ np.array([est.coef[k] for k in names])


# -- reporting ----------------------------------------------------------------

COLUMNS = (
    ("lim", "Linear-in-means"),
    ("lim_re", "Linear-in-means"),
    ("iv", "IV"),
    ("iv_re", "IV"),
)
ROW_LABELS = (
    ("peer", "Peer's Rank"),
    ("own_rank", "Own Rank"),
    ("age", "Age"),
    ("sex", "Sex"),
    ("f_edu", "Father's education"),
    ("m_edu", "Mother's education"),
    ("ethnic", "Ethnic nationality"),
)


def estimate_all(design):
    return {
        "lim": linear_in_means(design, False),
        "lim_re": linear_in_means(design, True),
        "iv": two_stage_iv(design, False),
        "iv_re": two_stage_iv(design, True),
    }


def report_json(estimates):
    return json.dumps({k: v.to_json() for k, v in estimates.items()}, sort_keys=True, indent=1) + "\n"


def report_table(estimates):
    """Aligned plain-text table, one column per specification."""
    keys = [k for k, _ in COLUMNS if k in estimates]
    heads = [dict(COLUMNS)[k] for k in keys]
    w0, w = 22, 17
    lines = ["".ljust(w0) + "".join(h.rjust(w) for h in heads)]
    lines.append("-" * (w0 + w * len(keys)))

    def fmt(v, d=3):
        return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.{d}f}"

    for key, label in ROW_LABELS:
        lines.append(label.ljust(w0) + "".join(fmt(estimates[k].coef.get(key)).rjust(w) for k in keys))
        lines.append("".ljust(w0) + "".join(
            (f"({fmt(estimates[k].se.get(key))})" if key in estimates[k].se else "").rjust(w) for k in keys))
    lines.append("Observations".ljust(w0) + "".join(str(estimates[k].n).rjust(w) for k in keys))
    lines.append("Adjusted R2".ljust(w0) + "".join(fmt(estimates[k].adj_r2).rjust(w) for k in keys))
    lines.append("- Log likelihood".ljust(w0) + "".join(
        fmt(None if estimates[k].loglik is None else -estimates[k].loglik).rjust(w) for k in keys))
    lines.append("First stage".ljust(w0))
    lines.append("  Peer's Rank".ljust(w0) + "".join(fmt(estimates[k].first_stage_pi1).rjust(w) for k in keys))
    lines.append("".ljust(w0) + "".join(
        (f"({fmt(estimates[k].first_stage_se)})" if estimates[k].first_stage_se is not None else "").rjust(w)
        for k in keys))
    lines.append("  F statistic".ljust(w0) + "".join(fmt(estimates[k].first_stage_F, 1).rjust(w) for k in keys))
    lines.append("  Adjusted R2".ljust(w0) + "".join(fmt(estimates[k].first_stage_adj_r2).rjust(w) for k in keys))
    lines.append("School FE".ljust(w0) + "".join("YES".rjust(w) for _ in keys))
    lines.append("Class RE".ljust(w0) + "".join(("YES" if estimates[k].method.endswith("RE") else "NO").rjust(w) for k in keys))
    return "\n".join(lines) + "\n"
