"""Hot loops: the replicate friend sampler and the per-classroom peer effect.

Each kernel has an explicit-loop version compiled with numba and a
vectorized numpy version. ``sample_trait_errors`` produces bit-identical
totals on both paths (same operation order, same pre-drawn uniforms);
``peer_vector`` agrees to rounding (matrix products are blocked
differently by BLAS).
"""

import numpy as np

from peerassign._accel import njit, numba_enabled
from peerassign.errors import ValidationError


# -- Algorithm-4 replicate sampler ------------------------------------------------

@njit
def _pick(xi, u):
    # inverse-CDF draw on an unnormalized row; falls back to the last positive
    # entry when rounding pushes the target onto the total
    n = xi.shape[0]
    total = 0.0
    for j in range(n):
        total += xi[j]
    t = u * total
    acc = 0.0
    last = -1
    for j in range(n):
        if xi[j] > 0.0:
            last = j
        acc += xi[j]
        if acc > t and xi[j] > 0.0:
            return j
    return last


@njit
def _trait_errors_nb(omega, B, A_s, A_f, gtab, U):
    R = U.shape[0]
    N = omega.shape[0]
    Q = A_s.shape[1]
    pe = np.zeros((R, Q))
    xi = np.empty(N)
    counts = np.empty(Q, dtype=np.int64)
    for r in range(R):
        for i in range(N):
            for j in range(N):
                xi[j] = omega[i, j]
            for q in range(Q):
                counts[q] = 0
            b_i = B[i]
            for b in range(b_i):
                k = _pick(xi, U[r, i, b])
                for q in range(Q):
                    counts[q] += A_s[k, q]
                if b + 1 < b_i:
                    m = xi[k]
                    xi[k] = 0.0
                    for j in range(N):
                        xi[j] = xi[j] / (1.0 - m)
            for q in range(Q):
                d = gtab[counts[q], b_i] - A_f[i, q]
                pe[r, q] += d * d
    return pe


def _trait_errors_np(omega, B, A_s, A_f, gtab, U):
    R = U.shape[0]
    N = omega.shape[0]
    Q = A_s.shape[1]
    pe = np.zeros((R, Q))
    rr = np.arange(R)
    for i in range(N):
        xi = np.repeat(omega[i][None, :], R, axis=0)
        counts = np.zeros((R, Q), dtype=np.int64)
        b_i = int(B[i])
        for b in range(b_i):
            c = np.cumsum(xi, axis=1)
            t = U[:, i, b] * c[:, -1]
            hit = (c > t[:, None]) & (xi > 0.0)
            pos = xi > 0.0
            last = N - 1 - np.argmax(pos[:, ::-1], axis=1)
            k = np.where(hit.any(axis=1), np.argmax(hit, axis=1), last)
            counts += A_s[k]
            if b + 1 < b_i:
                m = xi[rr, k].copy()
                xi[rr, k] = 0.0
                xi = xi / (1.0 - m)[:, None]
        d = gtab[counts, b_i] - A_f[i][None, :]
        pe += d * d
    return pe


def sample_trait_errors(omega, B, A_s, A_f, gtab, U):
    """Squared-error totals, shape (R, Q), for pre-drawn uniforms U (R, N, >=max B).

    Replicate r, student i draws B_i friends without replacement from
    omega[i] using U[r, i, :B_i]; trait counts among the drawn friends are
    mapped through ``gtab[count, B]`` and compared with the survey answer.
    """
    args = (
        np.ascontiguousarray(omega, dtype=np.float64),
        np.ascontiguousarray(B, dtype=np.int64),
        np.ascontiguousarray(A_s, dtype=np.int64),
        np.ascontiguousarray(A_f, dtype=np.float64),
        np.ascontiguousarray(gtab, dtype=np.float64),
        np.ascontiguousarray(U, dtype=np.float64),
    )
    if numba_enabled():
        return _trait_errors_nb(*args)
    return _trait_errors_np(*args)


# -- peer effect of one classroom ----------------------------------------------

@njit
def _peer_vector_nb(X, W0, W1, W2, z):
    N, D = X.shape
    K = W0.shape[1]
    H = W1.shape[1]
    sigma = np.zeros((N, K))
    delta = np.zeros((N, K))
    hid = np.zeros(H)
    for i in range(N):
        for k in range(K):
            s = 0.0
            for d in range(D):
                s += X[i, d] * W0[d, k]
            sigma[i, k] = s if s > 0.0 else 0.0
        for h in range(H):
            s = 0.0
            for k in range(K):
                s += sigma[i, k] * W1[k, h]
            hid[h] = s if s > 0.0 else 0.0
        for k in range(K):
            s = 0.0
            for h in range(H):
                s += hid[h] * W2[h, k]
            delta[i, k] = s if s > 0.0 else 0.0
    out = np.zeros(N)
    row = np.empty(N)
    for i in range(N):
        mx = -np.inf
        for j in range(N):
            s = 0.0
            for k in range(K):
                s += delta[i, k] * sigma[j, k]
            row[j] = s
            if j != i and s > mx:
                mx = s
        tot = 0.0
        acc = 0.0
        for j in range(N):
            if j == i:
                continue
            e = np.exp(row[j] - mx)
            tot += e
            acc += e * z[j]
        out[i] = acc / tot
    return out


def _peer_vector_np(X, W0, W1, W2, z):
    sigma = np.maximum(X @ W0, 0.0)
    delta = np.maximum(np.maximum(sigma @ W1, 0.0) @ W2, 0.0)
    u = delta @ sigma.T
    n = u.shape[0]
    off = ~np.eye(n, dtype=bool)
    m = np.max(np.where(off, u, -np.inf), axis=1)
    x = u - m[:, None]
    x[~off] = 0.0
    e = np.exp(x)
    e[~off] = 0.0
    return (e @ z) / e.sum(axis=1)


def peer_vector(X, W0, W1, W2, z):
    """Friendship-weighted classmate quantile, omega @ z, for one classroom."""
    args = tuple(np.ascontiguousarray(a, dtype=np.float64) for a in (X, W0, W1, W2, z))
    if args[0].shape[0] < 2:
        raise ValidationError("peer_vector needs at least two students")
    if numba_enabled():
        return _peer_vector_nb(*args)
    return _peer_vector_np(*args)
