"""Command-line pipeline: synth -> train -> predict -> estimate -> assign -> report.

Every artifact records a stage hash (a digest of the configuration sections
the stage depends on), the seed and the package version. A stage whose
upstream artifact carries a different hash than the current configuration
implies still runs, but warns that the input is stale.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from peerassign import __version__
from peerassign.errors import ConfigError, PeerAssignError, StageError

log = logging.getLogger("peerassign")

DEFAULTS = {
    "seed": 0,
    "paths": {"cohort": ""},
    "synth": {},
    "train": {"mu": 0.2, "kappa": 0.3, "lambda": 0.3, "step": 1.5, "epochs": 400, "warmup": 300,
              "init_scale": 0.3},
    "predict": {"replicates": 1000, "heatmaps": 3},
    "estimate": {"min_F": 1.0},
    "assign": {"school": -1, "beta": None, "fitness": "afga", "L": 150, "M": 100, "p_mut": 0.05,
               "phi": 1.0, "rho": 1.0, "seed": None},
}

# sections each stage's outputs depend on (transitively)
STAGE_DEPS = {
    "synth": ("seed", "paths", "synth"),
    "train": ("seed", "paths", "synth", "train"),
    "predict": ("seed", "paths", "synth", "train", "predict"),
    "estimate": ("seed", "paths", "synth", "train", "estimate"),
    "assign": ("seed", "paths", "synth", "train", "estimate", "assign"),
}


# -- configuration -----------------------------------------------------------------

def load_config(path=None):
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    import tomli

    try:
        with open(path, "rb") as fh:
            user = tomli.load(fh)
    except OSError as exc:
        raise StageError(f"cannot read config {path}: {exc}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config {path}: {exc}") from exc
    for key, val in user.items():
        if key not in cfg:
            raise ConfigError(f"config {path}: unknown key {key!r}")
        if isinstance(cfg[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config {path}: [{key}] must be a table")
            if key == "synth":
                from peerassign.cohort import SynthConfig

                known = {f.name for f in fields(SynthConfig)} - {"seed"}
            else:
                known = set(cfg[key])
            bad = sorted(set(val) - known)
            if bad:
                raise ConfigError(f"config {path}: unknown keys in [{key}]: {bad}")
            cfg[key].update(val)
        else:
            cfg[key] = val
    return cfg


def stage_hash(cfg, stage):
    sub = {k: cfg[k] for k in STAGE_DEPS[stage]}
    cohort_path = cfg["paths"].get("cohort")
    if cohort_path:
        try:
            sub["cohort_sha256"] = hashlib.sha256(Path(cohort_path).read_bytes()).hexdigest()
        except OSError as exc:
            raise StageError(f"cannot read cohort {cohort_path}: {exc}") from exc
    blob = json.dumps(sub, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class Run:
    """Resolved configuration plus artifact locations."""

    def __init__(self, cfg, out_dir):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.seed = int(cfg["seed"])

    def path(self, name):
        return self.out / name

    def meta(self, stage):
        return {"config_hash": stage_hash(self.cfg, stage), "seed": self.seed, "version": __version__}

    def require(self, name):
        p = self.path(name)
        if not p.exists():
            raise StageError(f"missing upstream artifact: {p}")
        return p

    def ensure_out(self):
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StageError(f"cannot create output directory {self.out}: {exc}") from exc

    def check_stale(self, artifact_meta, stage, name):
        want = stage_hash(self.cfg, stage)
        got = artifact_meta.get("config_hash")
        if got != want:
            log.warning("stale input: %s was written with config hash %s, current %s stage expects %s",
                        name, got, stage, want)
            return True
        return False

    # shared loaders
    def cohort(self):
        from peerassign.cohort import load_cohort, read_meta

        if self.cfg["paths"].get("cohort"):
            return load_cohort(self.cfg["paths"]["cohort"])
        p = self.require("cohort.csv")
        self.check_stale(read_meta(p), "synth", p.name)
        return load_cohort(p)

    def params(self):
        from peerassign.peernn import PeerNNParams

        p = self.require("params.json")
        try:
            d = json.loads(p.read_text())
        except (OSError, ValueError) as exc:
            raise StageError(f"cannot read {p}: {exc}") from exc
        self.check_stale(d.get("meta", {}), "train", p.name)
        return PeerNNParams.from_json(d)


def _write_json(path, obj):
    try:
        Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    except OSError as exc:
        raise StageError(f"cannot write {path}: {exc}") from exc


def _meta_line(meta):
    return " ".join(f"{k}={v}" for k, v in meta.items())


# -- stages --------------------------------------------------------------------------

def cmd_synth(run):
    from peerassign.cohort import SynthConfig, save_cohort, synth_cohort

    if run.cfg["paths"].get("cohort"):
        raise ConfigError("paths.cohort is set; synth would be ignored downstream")
    sc = SynthConfig.from_dict({**run.cfg["synth"], "seed": run.seed})
    cohort, truth = synth_cohort(sc)
    run.ensure_out()
    meta = run.meta("synth")
    save_cohort(cohort, run.path("cohort.csv"), meta)
    d = truth.to_json()
    d["meta"] = meta
    _write_json(run.path("ground_truth.json"), d)
    log.info("synth: %d students in %d classrooms", cohort.n, len(cohort.class_ids))
    return 0


def _hyper(cfg):
    from peerassign.peernn import Hyper

    t = cfg["train"]
    return Hyper(float(t["mu"]), float(t["kappa"]), float(t["lambda"]))


def cmd_train(run):
    from peerassign.peernn import OptConfig, train

    cohort = run.cohort()
    t = run.cfg["train"]
    opt = OptConfig(step=float(t["step"]), epochs=int(t["epochs"]), warmup=int(t["warmup"]),
                    seed=run.seed, init_scale=float(t["init_scale"]))
    hyper = _hyper(run.cfg)
    params, history = train(cohort, hyper, opt, log_every=50, logger=log)
    run.ensure_out()
    meta = run.meta("train")
    params.save(run.path("params.json"), hyper=hyper, seed=run.seed, meta=meta)
    try:
        with open(run.path("loss_history.csv"), "w", newline="") as fh:
            fh.write(f"# {_meta_line(meta)}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "total", "bias_sq", "var", "homophily", "transitivity"])
            for k, r in enumerate(history):
                w.writerow([k, *(repr(float(v)) for v in (r.total, r.bias_sq, r.var, r.homophily, r.transitivity))])
    except OSError as exc:
        raise StageError(f"cannot write loss history: {exc}") from exc
    log.info("train: total loss %.6f -> %.6f", history[0].total, history[-1].total)
    return 0


def cmd_predict(run):
    from peerassign.evalharness import evaluate, export_heatmap, omega_diagnostics
    from peerassign.peernn import predict_omega

    cohort = run.cohort()
    params = run.params()
    p = run.cfg["predict"]
    test = cohort.classes_in_split("test") or cohort.class_ids
    run.ensure_out()
    meta = run.meta("predict")
    odir = run.path("omega")
    try:
        odir.mkdir(exist_ok=True)
    except OSError as exc:
        raise StageError(f"cannot create {odir}: {exc}") from exc
    diags = {}
    for k, c in enumerate(test):
        r = cohort.rows(c)
        om = predict_omega(params, cohort.X[r], c, cohort.ids[r])
        _write_omega_csv(odir / f"omega_{c}.csv", om, meta)
        if k < int(p["heatmaps"]):
            export_heatmap(om.values, odir / f"heatmap_{c}", comment=_meta_line(meta))
        diags[str(c)] = omega_diagnostics(om, cohort.gender[r]).to_dict()
    rep = evaluate(params, cohort, test, R=int(p["replicates"]), seed=run.seed)
    rep.write_csv(run.path("trait_errors.csv"), _meta_line(meta))
    med_nn, med_un = rep.medians()
    homs = [d["homophily"] for d in diags.values() if d["homophily"] is not None]
    _write_json(run.path("predict_summary.json"), {
        "meta": meta,
        "classrooms": [int(c) for c in test],
        "diagnostics": diags,
        "min_homophily": min(homs) if homs else None,
        "trait_summary": rep.summary(),
        "median_pe": {"peernn": med_nn.tolist(), "uniform": med_un.tolist()},
    })
    log.info("predict: %d test classrooms, min homophily %s", len(test), min(homs) if homs else None)
    return 0


def _write_omega_csv(path, om, meta):
    try:
        with open(path, "w", newline="") as fh:
            fh.write(f"# {_meta_line(meta)}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([str(s) for s in om.student_ids])
            for row in om.values:
                w.writerow([repr(float(v)) for v in row])
    except OSError as exc:
        raise StageError(f"cannot write {path}: {exc}") from exc


def cmd_estimate(run):
    from peerassign.peereffect import build_design, estimate_all, report_json, report_table
    from peerassign.peernn import predict_omega

    cohort = run.cohort()
    params = run.params()
    classes = cohort.classes_in_split("train")
    omegas = {c: predict_omega(params, cohort.X[cohort.rows(c)]) for c in classes}
    design = build_design(cohort, omegas, classes)
    est = estimate_all(design)
    run.ensure_out()
    meta = run.meta("estimate")
    d = json.loads(report_json(est))
    d["meta"] = meta
    _write_json(run.path("estimate.json"), d)
    try:
        run.path("estimate.txt").write_text(f"# {_meta_line(meta)}\n" + report_table(est), encoding="utf-8")
    except OSError as exc:
        raise StageError(f"cannot write estimate table: {exc}") from exc
    log.info("estimate: 2SLS beta %.4f (se %.4f)", est["iv"].beta, est["iv"].se_beta)
    return 0


def cmd_assign(run):
    from peerassign.assign import GAConfig, School, peer_effects, random_assignment, run_ga
    from peerassign.evalharness import export_heatmap, peer_effect_distribution, q_matrix
    from peerassign.peernn import predict_omega

    a = run.cfg["assign"]
    cohort = run.cohort()
    params = run.params()
    if a["beta"] is None:
        p = run.require("estimate.json")
        est = json.loads(p.read_text())
        run.check_stale(est.get("meta", {}), "estimate", p.name)
        beta = float(est["iv"]["beta"])
    else:
        beta = float(a["beta"])
    sid = int(a["school"])
    if sid < 0:
        sid = cohort.school_ids[0]
    school = School.from_cohort(cohort, sid)
    seed = run.seed if a["seed"] is None else int(a["seed"])
    base = dict(L=int(a["L"]), M=int(a["M"]), p_mut=float(a["p_mut"]), phi=float(a["phi"]),
                rho=float(a["rho"]), seed=seed)
    if a["fitness"] not in ("ga", "afga"):
        raise ConfigError(f"fitness must be ga or afga, got {a['fitness']!r}")
    runs = {kind: run_ga(school, params, beta, GAConfig(kind=kind, **base)) for kind in ("ga", "afga")}
    raw = random_assignment(school, seed)
    run.ensure_out()
    meta = run.meta("assign")
    for kind, r in runs.items():
        r.save(run.path(f"{kind}_run.json"), extra={"meta": meta, "beta": beta})
    chosen = runs[a["fitness"]]
    _write_json(run.path("assignment.json"), {
        "meta": meta, "school_id": sid, "fitness": a["fitness"], "beta": beta,
        "C1": list(chosen.best.C1), "C2": list(chosen.best.C2), "best_fitness": chosen.best_fitness,
    })
    policies = {"raw": raw, "GA": runs["ga"].best, "AFGA": runs["afga"].best}
    qdir = run.path("qmatrix")
    try:
        qdir.mkdir(exist_ok=True)
    except OSError as exc:
        raise StageError(f"cannot create {qdir}: {exc}") from exc
    for name, pol in policies.items():
        for k, room in enumerate((pol.C1, pol.C2), start=1):
            pos = school.positions(room)
            om = predict_omega(params, school.X[pos])
            export_heatmap(q_matrix(om, school.z[pos]), qdir / f"q_{name}_c{k}", comment=_meta_line(meta))
    dist = peer_effect_distribution(policies, params, beta, school)
    dist.write_csv(run.path("peer_effect_distribution.csv"), _meta_line(meta))
    log.info("assign: school %d, GA %.5f, AFGA %.5f", sid, runs["ga"].best_fitness, runs["afga"].best_fitness)
    return 0


def cmd_report(run):
    from peerassign.cohort import read_meta

    summary = {"version": __version__, "seed": run.seed, "stages": {}}
    sources = {
        "synth": ("cohort.csv", None), "train": ("params.json", "meta"), "predict": ("predict_summary.json", "meta"),
        "estimate": ("estimate.json", "meta"), "assign": ("assignment.json", "meta"),
    }
    if run.cfg["paths"].get("cohort"):
        sources.pop("synth")
    for stage, (name, key) in sources.items():
        p = run.path(name)
        if not p.exists():
            summary["stages"][stage] = {"present": False}
            continue
        if key is None:
            m, d = read_meta(p), None
        else:
            d = json.loads(p.read_text())
            m = d.get(key, {})
        entry = {"present": True, "config_hash": m.get("config_hash"),
                 "stale": run.check_stale(m, stage, name)}
        if stage == "train":
            hist = run.path("loss_history.csv")
            if hist.exists():
                last = hist.read_text().strip().splitlines()[-1].split(",")
                entry["final_loss"] = float(last[1])
        elif stage == "predict":
            entry["min_homophily"] = d["min_homophily"]
            entry["median_pe"] = d["median_pe"]
        elif stage == "estimate":
            entry["beta"] = {k: d[k]["beta"] for k in ("lim", "lim_re", "iv", "iv_re") if k in d}
            entry["first_stage_F"] = d["iv"]["first_stage_F"] if "iv" in d else None
        elif stage == "assign":
            entry.update({k: d[k] for k in ("school_id", "fitness", "best_fitness", "beta")})
        summary["stages"][stage] = entry
    if not any(s["present"] for s in summary["stages"].values()):
        raise StageError(f"no artifacts found in {run.out}")
    run.ensure_out()
    _write_json(run.path("report.json"), summary)
    print(json.dumps(summary, sort_keys=True, indent=1))
    return 0


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "predict": cmd_predict,
    "estimate": cmd_estimate, "assign": cmd_assign, "report": cmd_report,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="peerassign", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="TOML configuration file")
    ap.add_argument("--seed", type=int, help="global seed (overrides the config)")
    ap.add_argument("--out-dir", default="artifacts", help="artifact directory (default: artifacts)")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--version", action="version", version=f"peerassign {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", help="generate a synthetic cohort with known ground truth")
    sub.add_parser("train", help="fit the friendship network on train-split classrooms")
    p = sub.add_parser("predict", help="friendship matrices, heatmaps and trait prediction errors")
    p.add_argument("--replicates", type=int, help="sampling replicates per classroom")
    sub.add_parser("estimate", help="peer-effect regressions (OLS, 2SLS, random effects)")
    p = sub.add_parser("assign", help="GA / AFGA classroom assignment for one school")
    p.add_argument("--fitness", choices=("ga", "afga"))
    p.add_argument("--phi", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--iters", type=int, dest="L")
    p.add_argument("--swaps", type=int, dest="M")
    p.add_argument("--mut-prob", type=float, dest="p_mut")
    p.add_argument("--seed", type=int, dest="assign_seed")
    p.add_argument("--school", type=int)
    p.add_argument("--beta", type=float)
    sub.add_parser("report", help="consolidated run summary")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.command == "predict" and args.replicates is not None:
            cfg["predict"]["replicates"] = args.replicates
        if args.command == "assign":
            for key in ("fitness", "phi", "rho", "L", "M", "p_mut", "school", "beta"):
                v = getattr(args, key)
                if v is not None:
                    cfg["assign"][key] = v
            if args.assign_seed is not None:
                cfg["assign"]["seed"] = args.assign_seed
        return COMMANDS[args.command](Run(cfg, args.out_dir))
    except PeerAssignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
