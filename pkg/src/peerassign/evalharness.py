"""Out-of-sample evaluation of friendship matrices and assignment artifacts.

Prediction error follows the sampling experiment: each student draws B
friends without replacement from their omega row, the trait counts among
the drawn friends go through the answer correspondence G, and squared
deviations from the recorded survey answers are summed over students.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from peerassign.cohort import ARD_CORRESPONDENCE, MAX_FRIENDS, N_TRAITS
from peerassign.errors import NumericError, StageError, ValidationError
from peerassign.kernels import sample_trait_errors
from peerassign.peernn import OmegaMatrix, check_omega, predict_omega


def correspondence_G(count, B):
    """Expected survey answer for `count` of `B` friends; ambiguous cells average."""
    count, B = int(count), int(B)
    if not (0 <= count <= B and 1 <= B <= MAX_FRIENDS):
        raise ValidationError(f"correspondence_G needs 0 <= count <= B, 1 <= B <= 5; got ({count}, {B})")
    answers = ARD_CORRESPONDENCE[(B, count)]
    return sum(answers) / len(answers)


def g_table():
    """G as a (6, 6) lookup indexed [count, B]; unused cells are nan."""
    t = np.full((MAX_FRIENDS + 1, MAX_FRIENDS + 1), np.nan)
    for (B, count), _ in ARD_CORRESPONDENCE.items():
        t[count, B] = correspondence_G(count, B)
    return t


def uniform_baseline_omega(N, class_id=None, student_ids=None):
    N = int(N)
    if N < 2:
        raise ValidationError("uniform baseline needs N >= 2")
    om = np.full((N, N), 1.0 / (N - 1))
    np.fill_diagonal(om, 0.0)
    return OmegaMatrix(om, class_id, None if student_ids is None else tuple(student_ids))


def sample_without_replacement(omega_row, B, rng):
    """Indicator vector of B distinct draws; the row is renormalized after each draw."""
    xi = np.array(omega_row, dtype=np.float64)
    if xi.ndim != 1 or np.any(xi < 0) or not np.all(np.isfinite(xi)) or xi.sum() <= 0:
        raise ValidationError("omega row must be a nonnegative probability vector")
    B = int(B)
    if B < 0 or B > np.count_nonzero(xi):
        raise NumericError(f"cannot draw {B} distinct friends from {np.count_nonzero(xi)} with positive mass")
    v = np.zeros(len(xi), dtype=np.int64)
    for b in range(B):
        p = xi / xi.sum()
        k = int(rng.choice(len(xi), p=p))
        v[k] = 1
        if b + 1 < B:
            e = np.zeros_like(xi)
            e[k] = 1.0
            xi = (xi - e * xi) / (1.0 - e @ xi)
    return v


def replicate_uniforms(seed, R, N):
    """Uniforms for R replicates; replicate r uses its own stream seeded by (seed, r)."""
    if R < 1:
        raise ValidationError("R must be >= 1")
    return np.stack([np.random.default_rng([int(seed), r]).random((N, MAX_FRIENDS)) for r in range(R)])


def _check_support(om, B):
    support = np.count_nonzero(om > 0, axis=1)
    bad = np.flatnonzero(B > support)
    if bad.size:
        raise NumericError(f"students at rows {bad.tolist()} need more friends than their omega row supports")


def trait_errors(omega, cohort, class_id, R=1000, seed=0):
    """(R, 10) matrix of squared-error totals, all traits from the same draws."""
    om = np.asarray(omega, dtype=np.float64)
    r = cohort.rows(class_id)
    if om.shape != (len(r), len(r)):
        raise ValidationError(f"omega shape {om.shape} does not match classroom {class_id} of size {len(r)}")
    check_omega(om)
    B = cohort.B[r]
    _check_support(om, B)
    U = replicate_uniforms(seed, R, len(r))
    return sample_trait_errors(om, B, cohort.A_s[r], cohort.A_f[r], g_table(), U)


def prediction_error(omega, cohort, class_id, q, R=1000, seed=0):
    """Replicate totals PE_q for trait index q (0-based)."""
    if not 0 <= int(q) < N_TRAITS:
        raise ValidationError(f"trait index {q} outside 0..{N_TRAITS - 1}")
    return trait_errors(omega, cohort, class_id, R, seed)[:, int(q)]


@dataclass
class TraitErrorReport:
    class_ids: list
    R: int
    peernn: np.ndarray  # (R, 10), summed over the listed classrooms
    uniform: np.ndarray

    def medians(self):
        return np.median(self.peernn, axis=0), np.median(self.uniform, axis=0)

    def summary(self):
        out = []
        for q in range(N_TRAITS):
            row = {"trait": q + 1}
            for name, m in (("peernn", self.peernn[:, q]), ("uniform", self.uniform[:, q])):
                lo, med, hi = quantiles(m, (0.25, 0.5, 0.75))
                row.update({f"{name}_q25": lo, f"{name}_median": med, f"{name}_q75": hi, f"{name}_mean": float(m.mean())})
            out.append(row)
        return out

    def write_csv(self, path, header_comment=None):
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trait", "replicate", "model", "pe"])
            for name, m in (("peernn", self.peernn), ("uniform", self.uniform)):
                for q in range(N_TRAITS):
                    for r in range(self.R):
                        w.writerow([q + 1, r, name, repr(float(m[r, q]))])


def evaluate(params, cohort, class_ids=None, R=1000, seed=0):
    """PeerNN vs uniform-baseline errors summed over classrooms (default: test split)."""
    if class_ids is None:
        class_ids = cohort.classes_in_split("test")
    if not class_ids:
        raise ValidationError("no classrooms to evaluate")
    tot_nn = np.zeros((R, N_TRAITS))
    tot_un = np.zeros((R, N_TRAITS))
    for c in class_ids:
        r = cohort.rows(c)
        # each classroom uses its own stream so totals do not depend on list order
        s = int(np.random.SeedSequence([int(seed), int(c)]).generate_state(1)[0])
        tot_nn += trait_errors(predict_omega(params, cohort.X[r]), cohort, c, R, s)
        tot_un += trait_errors(uniform_baseline_omega(len(r)), cohort, c, R, s)
    return TraitErrorReport(list(class_ids), R, tot_nn, tot_un)


# -- diagnostics -----------------------------------------------------------------

@dataclass
class OmegaDiagnostics:
    homophily: float | None
    centrality: float
    dispersion: float
    density: dict

    def to_dict(self):
        return {"homophily": self.homophily, "centrality": self.centrality,
                "dispersion": self.dispersion, "density": self.density}


def omega_diagnostics(omega, genders):
    om = np.asarray(omega, dtype=np.float64)
    check_omega(om)
    g = np.asarray(genders)
    if g.shape != (om.shape[0],):
        raise ValidationError("one gender label per student required")
    if len(np.unique(g)) < 2:
        homophily = None
    else:
        same = g[:, None] == g[None, :]
        homophily = float((om * same).sum(axis=1).mean())
    col = om.sum(axis=0)
    mx = om.max(axis=1)
    lo, med, hi = quantiles(mx, (0.25, 0.5, 0.75))
    return OmegaDiagnostics(
        homophily=homophily,
        centrality=float(col.max() / col.mean()),
        dispersion=float(col.std() / col.mean()),
        density={"min": float(mx.min()), "q25": lo, "median": med, "q75": hi, "max": float(mx.max())},
    )


def q_matrix(omega, z):
    """Symmetric pairwise demeaned peer effects q_ij = w_ij zt_j + w_ji zt_i."""
    om = np.asarray(omega, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if om.ndim != 2 or om.shape[0] != om.shape[1] or z.shape != (om.shape[0],):
        raise ValidationError(f"omega {om.shape} and z {z.shape} do not agree")
    zt = z - z.mean()
    a = om * zt[None, :]
    q = a + a.T
    np.fill_diagonal(q, 0.0)
    return q


def quantiles(x, probs):
    """Type-7 (linear interpolation) sample quantiles."""
    return [float(v) for v in np.quantile(np.asarray(x, dtype=np.float64), probs, method="linear")]


# -- artifacts -------------------------------------------------------------------

def export_heatmap(matrix, path, scale=None, comment=None):
    """Write ``<path>.csv`` and ``<path>.pgm``.

    The PGM is plain (P2) 8-bit grayscale, min-max scaled over `scale`
    (default: the matrix range) and inverted so larger values are darker.
    A constant matrix maps to mid gray.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or not np.all(np.isfinite(m)):
        raise ValidationError("heatmap needs a finite 2-D matrix")
    base = Path(path)
    if base.suffix in (".csv", ".pgm"):
        base = base.with_suffix("")
    lo, hi = (float(m.min()), float(m.max())) if scale is None else map(float, scale)
    if hi > lo:
        level = np.rint(255.0 * (1.0 - np.clip((m - lo) / (hi - lo), 0.0, 1.0))).astype(int)
    else:
        level = np.full(m.shape, 128, dtype=int)
    try:
        with open(base.with_suffix(".csv"), "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            for row in m:
                w.writerow([repr(float(v)) for v in row])
        with open(base.with_suffix(".pgm"), "w") as fh:
            fh.write("P2\n")
            fh.write(f"# inverted grayscale: 0 (black) = {hi!r}, 255 (white) = {lo!r}\n")
            if comment:
                fh.write(f"# {comment}\n")
            fh.write(f"{m.shape[1]} {m.shape[0]}\n255\n")
            for row in level:
                fh.write(" ".join(str(v) for v in row) + "\n")
    except OSError as exc:
        raise StageError(f"cannot write heatmap {base}: {exc}") from exc
    return base.with_suffix(".csv"), base.with_suffix(".pgm")


def read_matrix_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            rows.append([float(v) for v in line.strip().split(",")])
    return np.asarray(rows)


def read_pgm(path):
    toks = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0]
            toks.extend(line.split())
    if not toks or toks[0] != "P2":
        raise ValidationError(f"{path} is not a plain PGM")
    w, h, maxval = int(toks[1]), int(toks[2]), int(toks[3])
    return np.asarray(toks[4:4 + w * h], dtype=int).reshape(h, w), maxval


@dataclass
class PeerEffectDistribution:
    values: dict  # policy -> vector of beta * omega_tilde
    quantiles: dict  # policy -> (q25, q50, q75)
    means: dict

    def write_csv(self, path, header_comment=None):
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["policy", "kind", "value"])
            for name, v in self.values.items():
                for x in v:
                    w.writerow([name, "value", repr(float(x))])
                for tag, x in zip(("q25", "q50", "q75"), self.quantiles[name]):
                    w.writerow([name, tag, repr(float(x))])
                w.writerow([name, "mean", repr(float(self.means[name]))])


def peer_effect_distribution(assignments, params, beta, school):
    """Per-policy predicted peer effects for one school.

    `assignments` maps a policy name (raw, GA, AFGA) to an ``Assignment``.
    """
    from peerassign.assign import peer_effects

    values, qs, means = {}, {}, {}
    for name, a in assignments.items():
        pe1, pe2 = peer_effects(a.C1, a.C2, params, school, beta)
        v = np.concatenate([pe1, pe2])
        values[name] = v
        qs[name] = tuple(quantiles(v, (0.25, 0.5, 0.75)))
        means[name] = float(v.mean())
    return PeerEffectDistribution(values, qs, means)
