"""Students, classrooms and schools: CSV ingestion and a synthetic generator.

The cohort is stored column-wise (one numpy array per field); ``Student``
and ``Classroom`` are lightweight views for callers that want records.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from peerassign.errors import ConfigError, ParseError, StageError, ValidationError

N_TRAITS = 10
MAX_FRIENDS = 5
CONTROL_NAMES = ("age", "f_edu", "m_edu", "ethnic")
SPLITS = ("train", "test")

# Answer sets a student may give for "how many of your B best friends have
# trait q" when `count` of them do. 1 = none, 2 = one or two, 3 = most.
ARD_CORRESPONDENCE = {
    (1, 0): (1,), (1, 1): (2, 3),
    (2, 0): (1,), (2, 1): (2,), (2, 2): (2, 3),
    (3, 0): (1,), (3, 1): (2,), (3, 2): (2, 3), (3, 3): (3,),
    (4, 0): (1,), (4, 1): (2,), (4, 2): (2,), (4, 3): (3,), (4, 4): (3,),
    (5, 0): (1,), (5, 1): (2,), (5, 2): (2,), (5, 3): (3,), (5, 4): (3,), (5, 5): (3,),
}


def ard_encode(count, B):
    """Survey answer for `count` friends (out of `B`) having a trait.

    Where the answer is ambiguous ("one or two" vs "most"), "most" is chosen
    when the friends with the trait are a strict majority.
    """
    count, B = int(count), int(B)
    if not (0 <= count <= B <= MAX_FRIENDS):
        raise ValidationError(f"ard_encode needs 0 <= count <= B <= 5, got count={count}, B={B}")
    if count == 0:
        return 1
    if count >= 3 or 2 * count > B:
        return 3
    return 2


@dataclass(frozen=True)
class Student:
    id: int
    school_id: int
    class_id: int
    gender: int
    z: float
    X: tuple
    A_s: tuple
    B: int
    A_f: tuple
    y: float
    controls: tuple


@dataclass(frozen=True)
class Classroom:
    class_id: int
    school_id: int
    student_ids: tuple
    split: str = "train"

    @property
    def N(self):
        return len(self.student_ids)


@dataclass
class Cohort:
    """Column-oriented student table.

    Row order is significant: a classroom's students appear in the order of
    their rows, and that order is the row/column order of its friendship
    matrix.
    """

    ids: np.ndarray
    school_id: np.ndarray
    class_id: np.ndarray
    gender: np.ndarray
    z: np.ndarray
    B: np.ndarray
    y: np.ndarray
    controls: np.ndarray
    X: np.ndarray
    A_s: np.ndarray
    A_f: np.ndarray
    split: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.school_id = np.asarray(self.school_id, dtype=np.int64)
        self.class_id = np.asarray(self.class_id, dtype=np.int64)
        self.gender = np.asarray(self.gender, dtype=np.int64)
        self.z = np.asarray(self.z, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.controls = np.asarray(self.controls, dtype=np.float64).reshape(len(self.ids), len(CONTROL_NAMES))
        self.X = np.asarray(self.X, dtype=np.float64).reshape(len(self.ids), -1)
        self.A_s = np.asarray(self.A_s, dtype=np.int64).reshape(len(self.ids), N_TRAITS)
        self.A_f = np.asarray(self.A_f, dtype=np.int64).reshape(len(self.ids), N_TRAITS)
        self.split = {int(k): str(v) for k, v in self.split.items()}
        self._validate()
        self._index()

    # -- construction helpers -------------------------------------------------

    def _validate(self):
        n = len(self.ids)
        if n == 0:
            raise ValidationError("cohort has no students")
        for name in ("school_id", "class_id", "gender", "z", "B", "y"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"column {name} has length {len(getattr(self, name))}, expected {n}")
        if len(np.unique(self.ids)) != n:
            _, counts = np.unique(self.ids, return_counts=True)
            raise ValidationError(f"duplicate student ids: {sorted(np.unique(self.ids)[counts > 1].tolist())}")

        bad = {}

        def flag(mask, why):
            offenders = self.ids[mask].tolist()
            if offenders:
                bad[why] = offenders

        flag(~np.isin(self.gender, (0, 1)), "gender not in {0,1}")
        flag(~((self.z >= 0) & (self.z <= 1)), "z outside [0,1]")
        flag((self.B < 1) | (self.B > MAX_FRIENDS), "B outside {1..5}")
        flag(~np.all(np.isin(self.A_f, (1, 2, 3)), axis=1), "A_f entry outside {1,2,3}")
        flag(~np.all(np.isin(self.A_s, (0, 1)), axis=1), "A_s entry outside {0,1}")
        flag(~np.all(np.isfinite(self.X), axis=1), "non-finite feature")
        flag(~np.isfinite(self.y) | ~np.all(np.isfinite(self.controls), axis=1), "non-finite outcome or control")
        if bad:
            detail = "; ".join(f"{why}: ids {ids}" for why, ids in bad.items())
            raise ValidationError(f"invalid students: {detail}")

        # a classroom must sit in exactly one school
        for c in np.unique(self.class_id):
            schools = np.unique(self.school_id[self.class_id == c])
            if len(schools) != 1:
                raise ValidationError(f"classroom {c} spans schools {schools.tolist()}")

        D = self.X.shape[1]
        if D < 2:
            raise ValidationError("feature matrix needs at least gender and z columns")
        has_gender = any(np.array_equal(self.X[:, k], self.gender) for k in range(D))
        has_z = any(np.array_equal(self.X[:, k], self.z) for k in range(D))
        if not (has_gender and has_z):
            raise ValidationError("feature matrix must contain the gender and z columns")

        for c, s in self.split.items():
            if s not in SPLITS:
                raise ValidationError(f"classroom {c}: split {s!r} not in {SPLITS}")

    def _index(self):
        self._rows = {}
        order = []
        for i, c in enumerate(self.class_id.tolist()):
            if c not in self._rows:
                self._rows[c] = []
                order.append(c)
            self._rows[c].append(i)
        self._rows = {c: np.asarray(r, dtype=np.int64) for c, r in self._rows.items()}
        self._class_order = order
        for c in order:
            self.split.setdefault(c, "train")
        self._id_to_row = {int(s): i for i, s in enumerate(self.ids.tolist())}

    # -- views ----------------------------------------------------------------

    @property
    def n(self):
        return len(self.ids)

    @property
    def D(self):
        return self.X.shape[1]

    @property
    def class_ids(self):
        return list(self._class_order)

    @property
    def school_ids(self):
        seen = []
        for s in self.school_id.tolist():
            if s not in seen:
                seen.append(s)
        return seen

    def rows(self, class_id):
        """Row indices of one classroom, in student order."""
        try:
            return self._rows[int(class_id)]
        except KeyError:
            raise ValidationError(f"unknown classroom {class_id}") from None

    def rows_for_ids(self, student_ids):
        try:
            return np.asarray([self._id_to_row[int(s)] for s in student_ids], dtype=np.int64)
        except KeyError as exc:
            raise ValidationError(f"unknown student id {exc.args[0]}") from None

    def school_rows(self, school_id):
        return np.flatnonzero(self.school_id == int(school_id))

    def classroom(self, class_id):
        r = self.rows(class_id)
        return Classroom(
            class_id=int(class_id),
            school_id=int(self.school_id[r[0]]),
            student_ids=tuple(self.ids[r].tolist()),
            split=self.split[int(class_id)],
        )

    @property
    def classrooms(self):
        return [self.classroom(c) for c in self._class_order]

    def classes_in_split(self, split):
        return [c for c in self._class_order if self.split[c] == split]

    def student(self, row):
        return Student(
            id=int(self.ids[row]),
            school_id=int(self.school_id[row]),
            class_id=int(self.class_id[row]),
            gender=int(self.gender[row]),
            z=float(self.z[row]),
            X=tuple(self.X[row].tolist()),
            A_s=tuple(self.A_s[row].tolist()),
            B=int(self.B[row]),
            A_f=tuple(self.A_f[row].tolist()),
            y=float(self.y[row]),
            controls=tuple(self.controls[row].tolist()),
        )

    @property
    def students(self):
        return [self.student(i) for i in range(self.n)]

    def subset(self, class_ids):
        """Cohort restricted to the given classrooms (in the given order)."""
        rows = np.concatenate([self.rows(c) for c in class_ids])
        return self.take(rows)

    def take(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        classes = set(self.class_id[rows].tolist())
        return Cohort(
            ids=self.ids[rows], school_id=self.school_id[rows], class_id=self.class_id[rows],
            gender=self.gender[rows], z=self.z[rows], B=self.B[rows], y=self.y[rows],
            controls=self.controls[rows], X=self.X[rows], A_s=self.A_s[rows], A_f=self.A_f[rows],
            split={c: s for c, s in self.split.items() if c in classes},
        )

    def equals(self, other):
        if not isinstance(other, Cohort):
            return False
        arrays = ("ids", "school_id", "class_id", "gender", "z", "B", "y", "controls", "X", "A_s", "A_f")
        return all(
            getattr(self, a).shape == getattr(other, a).shape and np.array_equal(getattr(self, a), getattr(other, a))
            for a in arrays
        ) and self.split == other.split


# -- CSV ----------------------------------------------------------------------

def csv_header(D):
    return (
        ["id", "school_id", "class_id", "gender", "z", "B", "y", *CONTROL_NAMES]
        + [f"x{k + 1}" for k in range(D)]
        + [f"as{q + 1}" for q in range(N_TRAITS)]
        + [f"af{q + 1}" for q in range(N_TRAITS)]
        + ["split"]
    )


_INT_COLUMNS = {"id", "school_id", "class_id", "gender", "B"} | {f"as{q + 1}" for q in range(N_TRAITS)} | {
    f"af{q + 1}" for q in range(N_TRAITS)
}


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def save_cohort(cohort, path, meta=None):
    """Write `cohort` as CSV. `meta` (a flat dict) goes into a leading '#' line."""
    path = Path(path)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if meta:
                fh.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(csv_header(cohort.D))
            for i in range(cohort.n):
                c = int(cohort.class_id[i])
                row = [
                    int(cohort.ids[i]), int(cohort.school_id[i]), c, int(cohort.gender[i]),
                    float(cohort.z[i]), int(cohort.B[i]), float(cohort.y[i]),
                    *[float(v) for v in cohort.controls[i]],
                    *[float(v) for v in cohort.X[i]],
                    *[int(v) for v in cohort.A_s[i]],
                    *[int(v) for v in cohort.A_f[i]],
                    cohort.split[c],
                ]
                w.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise StageError(f"cannot write cohort to {path}: {exc}") from exc


def read_meta(path):
    """Parse the leading '# key=value ...' line of an artifact, if any."""
    meta = {}
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if first.startswith("#"):
        for tok in first[1:].split():
            if "=" in tok:
                k, v = tok.split("=", 1)
                meta[k] = v
    return meta


def load_cohort(path):
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
    except OSError as exc:
        raise StageError(f"cannot read cohort {path}: {exc}") from exc

    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None:
        raise ParseError("no records")
    xcols = [h for h in header if re.fullmatch(r"x\d+", h)]
    expected = csv_header(len(xcols))
    if header != expected:
        missing = [h for h in expected if h not in header]
        extra = [h for h in header if h not in expected]
        raise ParseError(f"header mismatch; missing {missing}, unexpected {extra}", row=1)

    cols = {h: [] for h in header}
    n_rows = 0
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(rec)}", row=lineno)
        for h, v in zip(header, rec):
            if h == "split":
                cols[h].append(v)
                continue
            try:
                cols[h].append(int(v) if h in _INT_COLUMNS else float(v))
            except ValueError:
                raise ParseError(f"cannot parse {v!r}", row=lineno, column=h) from None
        n_rows += 1
    if n_rows == 0:
        raise ParseError("no records")

    split = {}
    for c, s in zip(cols["class_id"], cols["split"]):
        if split.setdefault(c, s) != s:
            raise ValidationError(f"classroom {c} has inconsistent split tags")

    def mat(names):
        return np.column_stack([np.asarray(cols[h]) for h in names])

    return Cohort(
        ids=cols["id"], school_id=cols["school_id"], class_id=cols["class_id"],
        gender=cols["gender"], z=cols["z"], B=cols["B"], y=cols["y"],
        controls=mat(CONTROL_NAMES), X=mat(xcols),
        A_s=mat([f"as{q + 1}" for q in range(N_TRAITS)]),
        A_f=mat([f"af{q + 1}" for q in range(N_TRAITS)]),
        split=split,
    )


# -- synthetic data -----------------------------------------------------------

# outcome coefficients on (own z, age, gender, father's edu, mother's edu, ethnic)
OUTCOME_GAMMA = (1.0, -0.05, -0.01, 0.02, 0.01, 0.01)


@dataclass(frozen=True)
class SynthConfig:
    num_schools: int = 60
    classes_per_school: int = 2
    class_size: tuple = (20, 30)
    n_features: int = 8
    beta_true: float = 1.0
    confounder: float = 0.5
    gender_homophily: float = 2.0
    ability_homophily: float = 1.0
    popularity_scale: float = 0.5
    sigma_eps: float = 0.2
    sigma_mu: float = 0.05
    school_scale: float = 0.3
    z_ability_corr: float = 0.9
    test_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.class_size
        if lo < 3 or hi < lo:
            raise ConfigError(f"class_size range {self.class_size} invalid; classes need at least 3 students")
        if self.num_schools < 1 or self.classes_per_school < 1:
            raise ConfigError("need at least one school and one classroom per school")
        if self.n_features < 2:
            raise ConfigError("n_features must be >= 2 (gender and z)")
        scales = ("confounder", "gender_homophily", "ability_homophily", "popularity_scale",
                  "sigma_eps", "sigma_mu", "school_scale")
        for name in scales:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 <= self.test_fraction <= 1:
            raise ConfigError("test_fraction must lie in [0, 1]")
        if not -1 <= self.z_ability_corr <= 1:
            raise ConfigError("z_ability_corr must lie in [-1, 1]")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "class_size" in d:
            d["class_size"] = tuple(d["class_size"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["class_size"] = list(self.class_size)
        return d


@dataclass
class GroundTruth:
    friends: dict
    beta_true: float
    gamma: tuple
    ability: dict
    config: dict

    def friend_omega(self, cohort, class_id):
        """Row-normalized indicator matrix of true friends (1/B on each)."""
        r = cohort.rows(class_id)
        pos = {int(s): k for k, s in enumerate(cohort.ids[r].tolist())}
        om = np.zeros((len(r), len(r)))
        for k, s in enumerate(cohort.ids[r].tolist()):
            fr = self.friends[int(s)]
            om[k, [pos[f] for f in fr]] = 1.0 / len(fr)
        return om

    def to_json(self):
        return {
            "beta_true": self.beta_true,
            "gamma": list(self.gamma),
            "friends": {str(k): list(v) for k, v in sorted(self.friends.items())},
            "ability": {str(k): v for k, v in sorted(self.ability.items())},
            "config": self.config,
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            friends={int(k): tuple(v) for k, v in d["friends"].items()},
            beta_true=float(d["beta_true"]),
            gamma=tuple(d["gamma"]),
            ability={int(k): float(v) for k, v in d["ability"].items()},
            config=d["config"],
        )

    def save(self, path):
        try:
            Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
        except OSError as exc:
            raise StageError(f"cannot write ground truth to {path}: {exc}") from exc

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _traits(gender, z, aux, aux_binary, rng):
    n = len(gender)
    cols = [gender.astype(np.int64), (z > 0.5).astype(np.int64)]
    for k in range(aux.shape[1]):
        if len(cols) == N_TRAITS:
            break
        cols.append(aux[:, k].astype(np.int64) if aux_binary[k] else (aux[:, k] > 0.5).astype(np.int64))
    while len(cols) < N_TRAITS:
        cols.append((rng.random(n) < 0.3).astype(np.int64))
    return np.column_stack(cols)


def _pick_friends(gender, ability, B, cfg, rng):
    """Top-B of utility + Gumbel noise, i.e. sequential softmax draws without replacement."""
    n = len(gender)
    same = (gender[:, None] == gender[None, :]).astype(np.float64)
    util = cfg.gender_homophily * same - cfg.ability_homophily * np.abs(ability[:, None] - ability[None, :])
    util = util + cfg.popularity_scale * rng.standard_normal(n)[None, :]
    util = util + rng.gumbel(size=(n, n))
    np.fill_diagonal(util, -np.inf)
    order = np.argsort(-util, axis=1, kind="stable")
    return [order[i, : B[i]] for i in range(n)]


def synth_cohort(config=None):
    """Generate a cohort with known friendships and a known peer effect.

    Returns ``(cohort, ground_truth)``. Train schools are split into
    classrooms uniformly at random; test schools are split by latent ability.
    """
    cfg = config if config is not None else SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    n_aux = cfg.n_features - 2
    aux_binary = [k % 2 == 0 for k in range(n_aux)]
    n_test = int(round(cfg.test_fraction * cfg.num_schools))
    test_schools = set(rng.choice(cfg.num_schools, size=n_test, replace=False).tolist()) if n_test else set()
    rho = cfg.z_ability_corr
    gamma = np.asarray(OUTCOME_GAMMA)

    parts = []
    friends = {}
    ability_of = {}
    split = {}
    next_id = 1
    for s in range(cfg.num_schools):
        school_id = s + 1
        sizes = rng.integers(cfg.class_size[0], cfg.class_size[1] + 1, size=cfg.classes_per_school)
        n = int(sizes.sum())
        ability = rng.standard_normal(n)
        n_boys = n // 2 + (int(rng.integers(2)) if n % 2 else 0)
        gender = rng.permutation(np.r_[np.ones(n_boys, np.int64), np.zeros(n - n_boys, np.int64)])
        z = ndtr(rho * ability + math.sqrt(1 - rho * rho) * rng.standard_normal(n))
        aux = np.column_stack(
            [(rng.random(n) < 0.5).astype(np.float64) if b else rng.random(n) for b in aux_binary]
        ) if n_aux else np.zeros((n, 0))
        controls = np.column_stack([
            14.0 + 0.5 * rng.standard_normal(n),
            rng.integers(1, 10, size=n).astype(np.float64),
            rng.integers(1, 10, size=n).astype(np.float64),
            (rng.random(n) < 0.1).astype(np.float64),
        ])
        A_s = _traits(gender, z, aux, aux_binary, rng)
        X = np.column_stack([gender.astype(np.float64), z, aux])
        school_effect = cfg.school_scale * rng.standard_normal()

        is_test = s in test_schools
        order = np.argsort(-ability, kind="stable") if is_test else rng.permutation(n)
        bounds = np.r_[0, np.cumsum(sizes)]
        for c in range(cfg.classes_per_school):
            class_id = s * cfg.classes_per_school + c + 1
            split[class_id] = "test" if is_test else "train"
            rows = np.sort(order[bounds[c]:bounds[c + 1]])
            m = len(rows)
            B = np.minimum(rng.integers(3, 6, size=m), m - 1)
            fr = _pick_friends(gender[rows], ability[rows], B, cfg, rng)
            ids = np.arange(next_id, next_id + m)
            next_id += m
            friend_z = np.array([z[rows][f].mean() for f in fr])
            A_f = np.empty((m, N_TRAITS), np.int64)
            for i in range(m):
                counts = A_s[rows][fr[i]].sum(axis=0)
                A_f[i] = [ard_encode(k, B[i]) for k in counts]
            own = np.column_stack([z[rows], controls[rows, 0], gender[rows], controls[rows, 1:]])
            y = (
                cfg.beta_true * friend_z
                + own @ gamma
                + school_effect
                + cfg.sigma_mu * rng.standard_normal()
                + cfg.confounder * ability[rows]
                + cfg.sigma_eps * rng.standard_normal(m)
            )
            for i in range(m):
                friends[int(ids[i])] = tuple(int(ids[j]) for j in fr[i])
                ability_of[int(ids[i])] = float(ability[rows][i])
            parts.append(dict(
                ids=ids, school_id=np.full(m, school_id), class_id=np.full(m, class_id),
                gender=gender[rows], z=z[rows], B=B, y=y, controls=controls[rows],
                X=X[rows], A_s=A_s[rows], A_f=A_f,
            ))

    cohort = Cohort(**{k: np.concatenate([p[k] for p in parts]) for k in parts[0]}, split=split)
    truth = GroundTruth(
        friends=friends, beta_true=float(cfg.beta_true), gamma=tuple(float(g) for g in gamma),
        ability=ability_of, config=cfg.to_dict(),
    )
    return cohort, truth
