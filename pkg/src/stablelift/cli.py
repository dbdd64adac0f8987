"""Command-line front end: ``stablelift run CONFIG [--set key=value ...]``."""
from __future__ import annotations

import argparse
import datetime
import json
import logging
import math
import os
import sys

import numpy as np

from . import __version__
from . import birkhoff as B
from . import config as C
from . import dynamics as D
from . import liftlab as L
from . import mixing as X
from . import observables as O
from . import pointprocess as P
from . import stablelaw as S
from .plotting import emit_plots

log = logging.getLogger("stablelift")

EXIT_OK, EXIT_CONFIG, EXIT_FAILED = 0, 2, 3


def _fmt(x):
    """Full-precision, locale-independent number formatting for JSON/CSV."""
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else str(float(x))
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, dict):
        return {k: _fmt(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_fmt(v) for v in x]
    return x


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_fmt(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def build_map(cfg) -> D.MapSpec:
    m = cfg["map"]
    return D.MapSpec.lsv(float(m["gamma"])) if m["kind"] == "lsv" else D.MapSpec.doubling()


def build_observable(cfg, m: D.MapSpec, measure=None) -> O.FrechetObservable:
    o = cfg["observable"]
    if o["variant"] is not None:
        gamma = m.gamma if not m.dyadic else 0.0
        return B.regime_observable(gamma, o["alpha"], o["x0"], o["variant"], measure)
    terms = ([(t.get("a", 1.0), t["x0"]) for t in o["terms"]] if o["terms"] is not None
             else [(o["a"], o["x0"])])
    holder = None
    if o["holder"]:
        holder = O.HolderPart(tuple((p["interval"][0], p["interval"][1], tuple(p["coefs"]))
                                    for p in o["holder"]))
    support = [tuple(iv) for iv in o["support"]] if o["support"] else None
    try:
        return O.FrechetObservable(tuple(terms), o["alpha"], support, holder)
    except ValueError as exc:
        raise C.ConfigError("observable", str(exc)) from exc


# ---------------------------------------------------------------- commands

def cmd_simulate(cfg, out):
    s = cfg["simulate"]
    m = build_map(cfg)
    measure = B.default_measure(m)
    obs = build_observable(cfg, m, measure)
    c_n = {"auto": None, "mean": s["n"] * float(O.expectation(obs, measure)), "none": 0.0}[s["centering"]]
    ec = B.EnsembleConfig(m, obs, s["n"], s["samples"], s["burn_in"], cfg["seed"], c_n=c_n,
                          workers=cfg["workers"])
    ens = B.scaled_ensemble(ec, measure)
    fit = ens.fit()
    ens.to_csv(os.path.join(out, "ensemble.csv"))
    report = {"fit": fit.params.to_dict(), "ks": fit.ks, "cf_residual": fit.cf_residual,
              "b_n": ens.stats["b_n"], "c_n": ens.stats["c_n"],
              "n_infinite": ens.stats["n_infinite"]}
    ok = True
    if s["expect_index"] is not None:
        ok = abs(fit.params.alpha - s["expect_index"]) <= s["tol_alpha"] and fit.ks <= s["tol_ks"]
        report["criterion"] = {"expect_index": s["expect_index"], "tol_alpha": s["tol_alpha"],
                               "tol_ks": s["tol_ks"], "pass": ok}
    _write_json(os.path.join(out, "fit.json"), report)
    log.info("alpha_hat=%.4f beta_hat=%.3f ks=%.4f", fit.params.alpha, fit.params.beta, fit.ks)
    return ok


def cmd_phase_sweep(cfg, out):
    s = cfg["phase_sweep"]
    v = B.phase_sweep(s["gammas"], s["alphas"], s["x0"], s["n"], s["samples"], cfg["seed"],
                      s["tol_alpha"], s["tol_ks"], cfg["workers"])
    B.write_sweep(v, os.path.join(out, "sweep.csv"), os.path.join(out, "sweep.json"))
    failed = [x for x in v if x.proven and not x.boundary and x.case != "outside" and not x.passed]
    return not (s["require_pass"] and failed)


def cmd_pointprocess(cfg, out):
    s = cfg["pointprocess"]
    m = build_map(cfg)
    measure = B.default_measure(m)
    obs = build_observable(cfg, m, measure)
    rec = P.exceedances(m, obs, s["n"], s["threshold"], cfg["seed"], s["tau"], measure=measure)
    gap = s["gap"] if s["gap"] is not None else P.default_gap(s["n"])
    cs = P.declusterize(rec, gap) if len(rec) else P.ClusterSet([], gap, rec.threshold, s["n"])
    rec.to_csv(os.path.join(out, "exceedances.csv"), cs.cluster_ids() if len(rec) else None)
    report = {"threshold": rec.threshold, "n": s["n"], "exceedances": len(rec),
              "clusters": len(cs.clusters), "gap": gap,
              "dispersion_raw": P.dispersion_index(rec.times, s["n"]) if len(rec) else None}
    ok = True
    try:
        ei = P.extremal_index_from(rec, s["method"], gap=gap, seed=cfg["seed"])
        report["extremal_index"] = {"theta": ei.theta, "stderr": ei.stderr, "method": ei.method}
        if s["expect_theta"] is not None:
            ok = abs(ei.theta - s["expect_theta"]) <= s["tol_theta"]
    except P.EstimationFailure as exc:
        report["extremal_index"] = {"error": str(exc)}
        ok = s["expect_theta"] is None
    try:
        report["poisson_test"] = P.poisson_test(cs, s["n"], seed=cfg["seed"])
    except P.EstimationFailure as exc:
        report["poisson_test"] = {"error": str(exc)}
    _write_json(os.path.join(out, "report.json"), report)
    return ok


def cmd_mixcheck(cfg, out):
    s = cfg["mixcheck"]
    m = build_map(cfg)
    measure = B.default_measure(m)
    obs = build_observable(cfg, m, measure)
    rows = X.trend_matrix(m, obs, s["eps"], s["n"], s["samples"], cfg["seed"], measure,
                          cfg["workers"])
    X.write_trend_csv(rows, os.path.join(out, "trend.csv"))
    checks = X.trend_checks(rows)
    ok = all(checks.values())
    last = [r for r in rows if r["eps"] == min(s["eps"]) and r["n"] == max(s["n"])][0]
    if s["max_statistic"] is not None:
        ok = ok and last["statistic"] <= s["max_statistic"]
    _write_json(os.path.join(out, "report.json"),
                {"monotone_in_eps": {str(k): v for k, v in checks.items()},
                 "corner_statistic": last["statistic"], "pass": ok})
    return ok


def cmd_induce(cfg, out):
    s = cfg["induce"]
    m = build_map(cfg)
    measure = B.default_measure(m)
    obs = build_observable(cfg, m, measure)
    sys_ = D.first_return_system(m, s["x0"], None if m.dyadic else measure, s["count"], cfg["seed"])
    with open(os.path.join(out, "induced_system.json"), "w") as fh:
        fh.write(sys_.to_json() + "\n")
    dec = L.decompose(obs, sys_, measure)
    rng = np.random.default_rng(cfg["seed"])
    errs = [L.representation_identity(dec, int(rng.integers(1, s["n"] + 1)), seed=i).rel_error
            for i in range(s["identity_pairs"])]
    ens = L.induced_sum_ensemble(dec, sys_, s["n"], s["samples"], cfg["seed"], cfg["workers"])
    ens.to_csv(os.path.join(out, "ensemble.csv"))
    report = {"decomposition": dec.to_dict(), "identity_max_rel_error": max(errs)}
    try:
        fit = ens.fit()
        report["fit"] = fit.params.to_dict()
        report["ks"] = fit.ks
    except S.StableFitError as exc:
        report["fit_error"] = str(exc)
    _write_json(os.path.join(out, "fit.json" if "fit" in report else "report.json"), report)
    return max(errs) <= s["identity_tol"]


def cmd_density(cfg, out):
    s = cfg["density"]
    m = build_map(cfg)
    if s["method"] == "ulam":
        if m.dyadic:
            d = D.lebesgue_density(s["bins"])
        else:
            try:
                d = D.ulam_density(m, s["bins"], grading=s["grading"])
            except ValueError as exc:
                raise C.ConfigError("density", str(exc)) from exc
    else:
        d = D.orbit_histogram_density(m, s["bins"], cfg["seed"], s["samples"])
    d.to_csv(os.path.join(out, "density.csv"))
    _write_json(os.path.join(out, "report.json"),
                {"method": d.method, "bins": d.bins, "grading": s["grading"], "residual": d.residual,
                 "value_at_half": d.value_at_point(0.5)})
    return True


def cmd_stable_sample(cfg, out):
    s = cfg["stable_sample"]
    try:
        p = S.StableParams(s["alpha"], s["beta"], s["scale"], s["loc"])
    except ValueError as exc:
        raise C.ConfigError("stable_sample", str(exc)) from exc
    x = S.sample_stable(p, cfg["seed"], s["m"])
    with open(os.path.join(out, "samples.csv"), "w") as fh:
        fh.write("i,value\n")
        for i, v in enumerate(x):
            fh.write(f"{i},{float(v)!r}\n")
    report = {"params": p.to_dict()}
    if s["fit"]:
        f = S.fit_stable(S.EmpiricalDistribution(x, {"seed": cfg["seed"]}))
        report["fit"] = f.params.to_dict()
        report["ks"] = f.ks
    _write_json(os.path.join(out, "report.json"), report)
    return True


COMMANDS = {"simulate": cmd_simulate, "phase-sweep": cmd_phase_sweep,
            "pointprocess": cmd_pointprocess, "mixcheck": cmd_mixcheck, "induce": cmd_induce,
            "density": cmd_density, "stable-sample": cmd_stable_sample}


def write_manifest(cfg, out, status):
    _write_json(os.path.join(out, "manifest.json"),
                {"config": cfg, "toolkit_version": __version__, "master_seed": cfg["seed"],
                 "status": status,
                 "created": datetime.datetime.now(datetime.timezone.utc).isoformat()})


def run(config_path, overrides=(), plots=True) -> int:
    try:
        cfg = C.load(config_path, overrides)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = cfg["output"]
    os.makedirs(out, exist_ok=True)
    try:
        ok = COMMANDS[cfg["command"]](cfg, out)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (B.EnsembleFailure, S.StableFitError, P.EstimationFailure, D.ExcursionCapError,
            L.DecompositionError, ValueError) as exc:
        print(f"experiment failed: {exc}", file=sys.stderr)
        write_manifest(cfg, out, "failed")
        return EXIT_FAILED
    write_manifest(cfg, out, "ok" if ok else "criterion-unmet")
    if plots:
        emit_plots(out)
    if not ok:
        print("experiment criterion unmet; see the report in " + out, file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="stablelift", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="action", required=True)
    r = sub.add_parser("run", help="run the experiment described by a YAML config")
    r.add_argument("config")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config leaf by dotted path (repeatable)")
    r.add_argument("--no-plots", action="store_true")
    p = sub.add_parser("plots", help="(re)emit SVG plots for a run directory")
    p.add_argument("run_dir")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.action == "plots":
        emit_plots(args.run_dir)
        return EXIT_OK
    return run(args.config, args.set, not args.no_plots)


if __name__ == "__main__":
    sys.exit(main())
