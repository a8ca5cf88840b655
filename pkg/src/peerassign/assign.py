"""Two-classroom assignment search (GA and fairness-penalized AFGA).

A school's students are split into classrooms C1 and C2 whose sizes differ
by at most one and where C1 holds between 35% and 65% of the minority
gender. Fitness is computed from the friendship network re-predicted for
each candidate classroom, since who befriends whom depends on who shares
the room.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from peerassign.errors import ConfigError, InfeasibleError, ValidationError
from peerassign.kernels import peer_vector
from peerassign.peernn import PeerNNParams

BAND = (0.35, 0.65)
FITNESS_KINDS = ("ga", "afga")
MAX_BRUTE = 16


@dataclass(frozen=True)
class School:
    """Students of one school: ids, gender (1 = boy), quantile z, features X."""

    ids: np.ndarray
    gender: np.ndarray
    z: np.ndarray
    X: np.ndarray
    school_id: int | None = None

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "gender", np.asarray(self.gender, dtype=np.int64))
        object.__setattr__(self, "z", np.asarray(self.z, dtype=np.float64))
        object.__setattr__(self, "X", np.asarray(self.X, dtype=np.float64).reshape(len(ids), -1))
        n = len(ids)
        if len(self.gender) != n or len(self.z) != n:
            raise ValidationError("school columns differ in length")
        if len(np.unique(ids)) != n:
            raise ValidationError("duplicate student ids in school")
        if not np.all(np.isin(self.gender, (0, 1))):
            raise ValidationError("gender must be 0 or 1")
        if n < 4:
            raise ValidationError("a school needs at least 4 students for two classrooms of 2")
        object.__setattr__(self, "_pos", {int(s): i for i, s in enumerate(ids.tolist())})

    @classmethod
    def from_cohort(cls, cohort, school_id):
        r = cohort.school_rows(school_id)
        if r.size == 0:
            raise ValidationError(f"unknown school {school_id}")
        return cls(cohort.ids[r], cohort.gender[r], cohort.z[r], cohort.X[r], int(school_id))

    @property
    def n(self):
        return len(self.ids)

    def positions(self, ids):
        try:
            return np.asarray([self._pos[int(s)] for s in ids], dtype=np.int64)
        except KeyError as exc:
            raise ValidationError(f"student {exc.args[0]} is not in this school") from None

    def minority(self):
        """(j, N_j): minority gender and its count; ties go to girls (0)."""
        nb = int(self.gender.sum())
        ng = self.n - nb
        return (1, nb) if nb < ng else (0, ng)


@dataclass(frozen=True)
class Assignment:
    C1: tuple
    C2: tuple
    feasible: bool = True
    fitness: float | None = None

    def to_dict(self):
        return {"C1": list(self.C1), "C2": list(self.C2), "feasible": self.feasible, "fitness": self.fitness}


def band_ok(count_j, N_j):
    """Gender-band test on the minority count placed in C1."""
    return BAND[0] * N_j <= count_j <= BAND[1] * N_j


def check(C1, C2, Nb, Ng, j, gender):
    """True iff C1 holds between 35% and 65% of gender j.

    `gender` maps student id to 0 (girl) or 1 (boy). C2 is implied; it is
    accepted for symmetry with the swap signature.
    """
    N_j = Nb if j == 1 else Ng
    count = sum(1 for s in C1 if gender[s] == j)
    return band_ok(count, N_j)


def swap(C1, C2, CP):
    """Exchange CP[0] (in C1) with CP[1] (in C2); a null pair is the identity."""
    if CP is None or (CP[0] is None and CP[1] is None):
        return tuple(C1), tuple(C2)
    a, b = CP
    if a not in C1 or b not in C2:
        raise ValidationError(f"swap pair {CP} is not (member of C1, member of C2)")
    return tuple(sorted((set(C1) - {a}) | {b})), tuple(sorted((set(C2) - {b}) | {a}))


def is_valid(school, C1, C2):
    """All assignment invariants: partition, size parity, gender band."""
    s1, s2 = set(C1), set(C2)
    if s1 & s2 or (s1 | s2) != set(school.ids.tolist()):
        return False
    if abs(len(s1) - len(s2)) > 1:
        return False
    j, N_j = school.minority()
    return band_ok(int(np.sum(school.gender[school.positions(C1)] == j)), N_j)


# -- fitness -----------------------------------------------------------------------

def _room_pe(school, pos, params, beta):
    if len(pos) < 2:
        raise ValidationError("each classroom needs at least two students")
    return beta * peer_vector(school.X[pos], params.W0, params.W1, params.W2, school.z[pos])


def peer_effects(C1, C2, params, school, beta):
    """Predicted peer effects beta * (omega z) for each classroom, in id order."""
    p1 = school.positions(sorted(C1))
    p2 = school.positions(sorted(C2))
    return _room_pe(school, p1, params, beta), _room_pe(school, p2, params, beta)


def _sd(v):
    return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0


def fitness_terms(pe1, pe2):
    """(mean term, within-classroom dispersion, across-classroom dispersion)."""
    allv = np.concatenate([pe1, pe2])
    return float(allv.sum() / len(allv)), _sd(pe1) + _sd(pe2), _sd(allv)


def _fit(pe1, pe2, kind, phi, rho):
    mean, within, across = fitness_terms(pe1, pe2)
    if kind == "ga":
        return mean
    return mean - phi * within - rho * across


def fitness_ga(C1, C2, params, school, beta):
    return _fit(*peer_effects(C1, C2, params, school, beta), "ga", 0.0, 0.0)


def fitness_afga(C1, C2, params, school, beta, phi=1.0, rho=1.0):
    if phi < 0 or rho < 0:
        raise ValidationError("phi and rho must be nonnegative")
    return _fit(*peer_effects(C1, C2, params, school, beta), "afga", phi, rho)


# -- GA ------------------------------------------------------------------------------

@dataclass(frozen=True)
class GAConfig:
    L: int = 150
    M: int = 100
    p_mut: float = 0.05
    phi: float = 1.0
    rho: float = 1.0
    seed: int = 0
    kind: str = "ga"

    def __post_init__(self):
        if self.L < 1 or self.M < 1:
            raise ConfigError("L and M must be >= 1")
        if not 0.0 <= self.p_mut <= 1.0:
            raise ConfigError("p_mut must lie in [0, 1]")
        if self.phi < 0 or self.rho < 0:
            raise ConfigError("phi and rho must be >= 0")
        if self.kind not in FITNESS_KINDS:
            raise ConfigError(f"fitness kind must be one of {FITNESS_KINDS}, got {self.kind!r}")


@dataclass
class GARun:
    policies: list  # PH: one (C1, C2) pair of id tuples per iteration
    fitness: list  # FSH
    best: Assignment
    best_fitness: float
    config: GAConfig
    school_id: int | None = None

    def to_json(self, extra=None):
        d = {
            "school_id": self.school_id,
            "config": asdict(self.config),
            "seed": self.config.seed,
            "fitness_history": [float(f) for f in self.fitness],
            "best_fitness": float(self.best_fitness),
            "best": {"C1": list(self.best.C1), "C2": list(self.best.C2)},
        }
        if extra:
            d.update(extra)
        return d

    def save(self, path, extra=None):
        with open(path, "w") as fh:
            json.dump(self.to_json(extra), fh, indent=2, sort_keys=True)
            fh.write("\n")


class _Search:
    """Mask-based state shared by run_ga, random_assignment and brute force."""

    def __init__(self, school, params, beta, kind="ga", phi=1.0, rho=1.0):
        self.school = school
        self.params = params if isinstance(params, PeerNNParams) else PeerNNParams(*params)
        self.beta = float(beta)
        self.kind, self.phi, self.rho = kind, float(phi), float(rho)
        self.j, self.N_j = school.minority()
        self.is_j = school.gender == self.j

    def feasible(self, in1):
        return band_ok(int(np.count_nonzero(in1 & self.is_j)), self.N_j)

    def score(self, in1):
        s = self.school
        pe1 = _room_pe(s, np.flatnonzero(in1), self.params, self.beta)
        pe2 = _room_pe(s, np.flatnonzero(~in1), self.params, self.beta)
        return _fit(pe1, pe2, self.kind, self.phi, self.rho)

    def assignment(self, in1, fitness=None):
        ids = self.school.ids
        return Assignment(tuple(sorted(ids[in1].tolist())), tuple(sorted(ids[~in1].tolist())),
                          self.feasible(in1), fitness)

    def initial(self, rng):
        n = self.school.n
        for _ in range(10 * n):
            in1 = np.zeros(n, dtype=bool)
            in1[rng.choice(n, n // 2, replace=False)] = True
            if self.feasible(in1):
                return in1
        raise InfeasibleError(f"no feasible partition found in {10 * n} random draws")

    def swap_feasible(self, in1, a, b):
        # a in C1 leaves, b in C2 enters; only a gender change moves the count
        d = int(self.is_j[b]) - int(self.is_j[a])
        return band_ok(int(np.count_nonzero(in1 & self.is_j)) + d, self.N_j)


def random_assignment(school, seed=0):
    """One feasible uniform draw of floor(|C|/2) students for C1."""
    s = _Search(school, PeerNNParams.init(school.X.shape[1], 0.0, 0), 0.0)
    return s.assignment(s.initial(np.random.default_rng(seed)))


def run_ga(school, params, beta, config=GAConfig()):
    """Single-chain search over feasible partitions.

    Iteration 0 records the random initial partition; each later iteration
    either mutates (one random feasible swap, applied unconditionally) with
    probability p_mut, or scores M candidate swaps drawn with replacement
    and applies the best one if it beats the previous recorded fitness.
    """
    s = _Search(school, params, beta, config.kind, config.phi, config.rho)
    rng = np.random.default_rng(config.seed)
    in1 = s.initial(rng)
    cur = s.score(in1)
    policies = [s.assignment(in1, cur)]
    fsh = [cur]
    n = school.n
    for _ in range(1, config.L):
        c1 = np.flatnonzero(in1)
        c2 = np.flatnonzero(~in1)
        if rng.random() < config.p_mut:
            for _ in range(10 * n):
                a, b = c1[rng.integers(len(c1))], c2[rng.integers(len(c2))]
                if s.swap_feasible(in1, a, b):
                    in1 = in1.copy()
                    in1[a], in1[b] = False, True
                    cur = s.score(in1)
                    break
        else:
            A = c1[rng.integers(len(c1), size=config.M)]
            Bs = c2[rng.integers(len(c2), size=config.M)]
            best, best_k = -math.inf, -1
            for k in range(config.M):
                if not s.swap_feasible(in1, A[k], Bs[k]):
                    continue
                cand = in1.copy()
                cand[A[k]], cand[Bs[k]] = False, True
                f = s.score(cand)
                if f > best:
                    best, best_k = f, k
            if best_k >= 0 and best > fsh[-1]:
                in1 = in1.copy()
                in1[A[best_k]], in1[Bs[best_k]] = False, True
                cur = best
        policies.append(s.assignment(in1, cur))
        fsh.append(cur)
    k = int(np.argmax(fsh))
    return GARun(policies, fsh, policies[k], fsh[k], config, school.school_id)


def brute_force_optimal(school, params, beta, kind="ga", phi=1.0, rho=1.0):
    """Exact argmax over all feasible partitions (|C| <= 16).

    Partitions are unordered, so C1 is taken to be the classroom holding the
    smallest id. Ties go to the lexicographically smallest C1.
    """
    n = school.n
    if n > MAX_BRUTE:
        raise ValidationError(f"brute force limited to {MAX_BRUTE} students, got {n}")
    if kind not in FITNESS_KINDS:
        raise ValidationError(f"fitness kind must be one of {FITNESS_KINDS}")
    s = _Search(school, params, beta, kind, phi, rho)
    order = np.argsort(school.ids, kind="stable")
    first, rest = order[0], order[1:]
    sizes = sorted({n // 2, n - n // 2})
    best = None
    for size in sizes:
        for combo in itertools.combinations(rest.tolist(), size - 1):
            in1 = np.zeros(n, dtype=bool)
            in1[first] = True
            in1[list(combo)] = True
            if not s.feasible(in1):
                continue
            f = s.score(in1)
            key = tuple(sorted(school.ids[in1].tolist()))
            if best is None or f > best[0] or (f == best[0] and key < best[1]):
                best = (f, key, in1)
    if best is None:
        raise InfeasibleError("no feasible partition exists")
    return s.assignment(best[2], best[0])


def all_feasible_fitness(school, params, beta, kind="ga", phi=1.0, rho=1.0):
    """Fitness of every feasible partition (same enumeration as brute force)."""
    n = school.n
    if n > MAX_BRUTE:
        raise ValidationError(f"enumeration limited to {MAX_BRUTE} students, got {n}")
    s = _Search(school, params, beta, kind, phi, rho)
    order = np.argsort(school.ids, kind="stable")
    out = []
    for size in sorted({n // 2, n - n // 2}):
        for combo in itertools.combinations(order[1:].tolist(), size - 1):
            in1 = np.zeros(n, dtype=bool)
            in1[[order[0], *combo]] = True
            if s.feasible(in1):
                out.append(s.score(in1))
    return np.asarray(out)


# -- disruptive-peer instance ------------------------------------------------------------

DISRUPTIVE_FEATURES = ("gender", "z", "magnet", "susceptible", "const")


def disruptive_params(pull=3.0, K=10, H=10):
    """Hand-set weights over features (gender, z, magnet, susceptible, const).

    sigma carries (magnet, susceptible); one hidden unit fires for
    susceptible non-magnets and drives delta's first latent. A susceptible
    student puts utility `pull` on the magnet and 0 on everyone else; all
    other students choose uniformly.
    """
    W0 = np.zeros((len(DISRUPTIVE_FEATURES), K))
    W0[2, 0] = 1.0
    W0[3, 1] = 1.0
    W1 = np.zeros((K, H))
    W1[1, 0] = 1.0
    W1[0, 0] = -2.0
    W2 = np.zeros((H, K))
    W2[0, 0] = pull
    return PeerNNParams(W0, W1, W2)


def disruptive_school(n=12, seed=0, n_susceptible=3, magnet_z=0.0):
    """One low-z magnet (id 1), `n_susceptible` students drawn to it, balanced genders."""
    if n < 4 or not 0 <= n_susceptible < n:
        raise ValidationError("need n >= 4 and 0 <= n_susceptible < n")
    rng = np.random.default_rng(seed)
    gender = np.zeros(n, dtype=np.int64)
    gender[rng.permutation(n)[: n // 2]] = 1
    z = np.round(rng.uniform(0.2, 1.0, n), 6)
    z[0] = magnet_z
    magnet = np.zeros(n)
    magnet[0] = 1.0
    susceptible = np.zeros(n)
    susceptible[1 + rng.permutation(n - 1)[:n_susceptible]] = 1.0
    X = np.column_stack([gender, z, magnet, susceptible, np.ones(n)])
    return School(np.arange(1, n + 1), gender, z, X, school_id=0)
