"""Scaled Birkhoff-sum ensembles, scaling exponents and the (gamma, alpha) regime diagram."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from . import observables as O
from ._parallel import pmap, split
from .dynamics import MapSpec, OrbitStream, default_density, sample_rng
from .stablelaw import EmpiricalDistribution, StableFitError, fit_stable

CHUNK = 1 << 16


class EnsembleFailure(RuntimeError):
    pass


def default_measure(m: MapSpec):
    """Lebesgue for dyadic maps, otherwise the cached graded Ulam density."""
    return O.LEBESGUE if m.dyadic else default_density(m)


def birkhoff_sum(m: MapSpec, obs, x: float, n: int) -> float:
    """sum_{j<n} phi(T^j x) along the orbit of x."""
    if n < 1:
        raise ValueError("n must be >= 1")
    stream = OrbitStream(m, np.random.default_rng(0), 0, start=x)
    total, done = 0.0, 0
    while done < n:
        k = min(CHUNK, n - done)
        xs = stream.take(k)
        s, _, _ = K.fold_sums(O.eval_into(obs, xs, np.empty(k)), math.inf)
        total += s
        done += k
    return total


@dataclass
class EnsembleConfig:
    map: MapSpec
    obs: O.FrechetObservable
    n: int
    samples: int
    burn_in: int = 4096
    master_seed: int = 0
    b_n: float | None = None
    c_n: float | None = None
    trunc_level: float | None = None
    workers: int = 1

    def __post_init__(self):
        if self.samples < 100:
            raise ValueError("samples must be >= 100")
        if self.n < 1:
            raise ValueError("n must be >= 1")

    def resolved_scaling(self, measure=None):
        """(b_n, c_n) with defaults from the observable: b_n from the tail, c_n = n E[phi] for alpha > 1."""
        measure = default_measure(self.map) if measure is None else measure
        b = self.b_n
        c = self.c_n
        if b is None:
            b = O.scaling_bn(self.obs, measure, self.n)
        if c is None:
            a = self.obs.alpha
            c = 0.0 if (a is not None and a < 1.0) else self.n * float(O.expectation(self.obs, measure))
        return float(b), float(c)


@dataclass
class SumEnsemble:
    values: EmpiricalDistribution
    raw: np.ndarray
    config: EnsembleConfig
    stats: dict = field(default_factory=dict)
    truncated: np.ndarray | None = None

    @property
    def scaled(self):
        """Scaled sums in sample-index order."""
        return (self.raw - self.stats["c_n"]) / self.stats["b_n"]

    def fit(self):
        return fit_stable(EmpiricalDistribution(self.values.samples[np.isfinite(self.values.samples)],
                                                self.values.provenance))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "raw_sum", "scaled"])
            for i, (r, s) in enumerate(zip(self.raw, self.scaled)):
                w.writerow([i, repr(float(r)), repr(float(s))])


def _ensemble_chunk(job):
    m, obs, n, burn_in, seed, level, lo, hi = job
    sums = np.empty(hi - lo)
    tsums = np.empty(hi - lo)
    bad = 0
    buf = np.empty(CHUNK)
    for i in range(lo, hi):
        stream = OrbitStream(m, sample_rng(seed, i), burn_in)
        s = st = 0.0
        done = 0
        while done < n:
            k = min(CHUNK, n - done)
            xs = stream.take(k)
            a, b, c = K.fold_sums(O.eval_into(obs, xs, buf[:k]), level)
            s += a
            st += b
            bad += c
            done += k
        sums[i - lo] = s
        tsums[i - lo] = st
    return sums, tsums, bad


def raw_sums(cfg: EnsembleConfig, level=math.inf):
    """Per-sample raw and truncated sums, independent of the worker count."""
    ranges = split(cfg.samples, max(1, cfg.workers) * 4 if cfg.workers > 1 else 1)
    jobs = [(cfg.map, cfg.obs, cfg.n, cfg.burn_in, cfg.master_seed, level, lo, hi)
            for lo, hi in ranges]
    parts = pmap(_ensemble_chunk, jobs, cfg.workers)
    sums = np.concatenate([p[0] for p in parts])
    tsums = np.concatenate([p[1] for p in parts])
    return sums, tsums, sum(p[2] for p in parts)


def scaled_ensemble(cfg: EnsembleConfig, measure=None) -> SumEnsemble:
    """S_n = (sum phi o T^j - c_n) / b_n over independent initial points."""
    t0 = time.perf_counter()
    b, c = cfg.resolved_scaling(measure)
    level = math.inf if cfg.trunc_level is None else cfg.trunc_level
    sums, tsums, bad = raw_sums(cfg, level)
    n_inf = int(np.sum(~np.isfinite(sums)))
    stats = {"b_n": b, "c_n": c, "n_infinite": n_inf, "nonfinite_terms": int(bad),
             "runtime_s": time.perf_counter() - t0, "workers": cfg.workers}
    if n_inf > 0.01 * cfg.samples:
        raise EnsembleFailure(f"{n_inf} of {cfg.samples} sums are infinite")
    vals = (sums - c) / b
    prov = {"experiment": "scaled_ensemble", "seed": cfg.master_seed, "n": cfg.n,
            "samples": cfg.samples, "map": cfg.map.to_dict()}
    return SumEnsemble(EmpiricalDistribution(vals, prov), sums, cfg, stats,
                       tsums if cfg.trunc_level is not None else None)


# ---------------------------------------------------------------- scaling exponent

@dataclass
class ScalingFit:
    alpha_hat: float
    slope: float
    r2: float
    ambiguous: bool
    n_list: list
    iqr: list


def scaling_exponent(m: MapSpec, obs, n_list, samples: int, seed: int = 0, workers: int = 1,
                     measure=None) -> ScalingFit:
    """1 / slope of log IQR(sum - c_n) against log n."""
    n_list = sorted(int(n) for n in n_list)
    if len(n_list) < 4 or n_list[-1] < 100 * n_list[0]:
        raise ValueError("need >= 4 values of n spanning >= 2 decades")
    measure = default_measure(m) if measure is None else measure
    a = obs.alpha
    mean = None if (a is not None and a < 1.0) else float(O.expectation(obs, measure))
    iqr = []
    for k, n in enumerate(n_list):
        cfg = EnsembleConfig(m, obs, n, samples, master_seed=seed + k, b_n=1.0,
                             c_n=0.0 if mean is None else n * mean, workers=workers)
        v = scaled_ensemble(cfg, measure).values.samples
        q1, q3 = np.quantile(v[np.isfinite(v)], [0.25, 0.75])
        iqr.append(float(q3 - q1))
    x, y = np.log(n_list), np.log(iqr)
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    r2 = 1.0 - resid.var() / y.var() if y.var() > 0 else 0.0
    return ScalingFit(float(1.0 / slope), float(slope), float(r2), bool(r2 < 0.95),
                      n_list, iqr)


# ---------------------------------------------------------------- regimes

@dataclass(frozen=True)
class Regime:
    case: str
    predicted_index: float
    scaling_exponent: float
    boundary: bool
    proven: bool


def case_iii_window(gamma):
    """Open interval of alpha where the zero-drift lifting argument applies."""
    if gamma <= 0:
        return (math.inf, -math.inf)
    return (1.0 / gamma, 1.0 + 1.0 / gamma ** 2 - 1.0 / gamma)


def classify_regime(gamma, alpha, drift, tol=1e-9) -> Regime:
    """Case of the LSV lifting theorem for index alpha and drift phi(0) - E[phi]."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if not 0.0 < alpha < 2.0:
        raise ValueError("alpha must lie in (0, 2)")
    boundary = math.isclose(1.0 / alpha, gamma, rel_tol=1e-12)
    if 1.0 / alpha >= gamma or boundary:
        return Regime("i", alpha, 1.0 / alpha, boundary, not boundary)
    if abs(drift) > tol:
        return Regime("ii", 1.0 / gamma, gamma, False, True)
    lo, hi = case_iii_window(gamma)
    if lo < alpha < hi:
        return Regime("iii", alpha, 1.0 / alpha, False, True)
    return Regime("outside", alpha, 1.0 / alpha, False, False)


def regime_observable(gamma, alpha, x0, variant: str, measure=None, drift_boost: float = 10.0):
    """Default observable per case.

    * ``i``: the bare singularity ``|x - x0|^(-1/alpha)``.
    * ``ii``: the singularity plus ``drift_boost (1 - x)^4``, which makes the
      drift phi(0) - E[phi] large so the return-time term dominates at
      moderate n.
    * ``iii``: ``(|x - x0|^(-1/alpha) - kappa) 1_[1/2, 1]`` with kappa chosen
      so that E[phi] = 0 (hence phi(0) = E[phi] = 0).
    """
    m = MapSpec.lsv(gamma) if gamma > 0 else MapSpec.doubling()
    measure = default_measure(m) if measure is None else measure
    if variant == "i":
        return O.FrechetObservable.single(x0, alpha)
    if variant == "ii":
        h = O.HolderPart.polynomial(drift_boost * np.array([1.0, -4.0, 6.0, -4.0, 1.0]))
        return O.FrechetObservable.single(x0, alpha, holder=h)
    if variant == "iii":
        if x0 < 0.5:
            raise ValueError("case iii observable needs x0 in [1/2, 1]")
        base = O.FrechetObservable.single(x0, alpha, support=[(0.5, 1.0)])
        kappa = float(O.expectation(base, measure)) / O.measure_of(measure, [(0.5, 1.0)])
        return O.FrechetObservable.single(x0, alpha, support=[(0.5, 1.0)],
                                          holder=O.HolderPart.constant(-kappa))
    raise ValueError(f"unknown variant {variant!r}")


@dataclass
class Verdict:
    gamma: float
    alpha: float
    x0: float
    case: str
    predicted_index: float
    fitted_index: float
    fitted_beta: float
    ks: float
    n: int
    samples: int
    seed: int
    passed: bool
    boundary: bool = False
    proven: bool = True
    drift: float = float("nan")
    error: str = ""

    def row(self):
        return {"gamma": self.gamma, "alpha": self.alpha, "x0": self.x0, "case": self.case,
                "predicted_index": self.predicted_index, "fitted_index": self.fitted_index,
                "fitted_beta": self.fitted_beta, "ks": self.ks, "n": self.n,
                "samples": self.samples, "seed": self.seed, "pass": self.passed}


def regime_experiment(gamma, alpha, x0, n=100000, samples=5000, seed=0, obs=None,
                      variant=None, tol_alpha=0.1, tol_ks=0.05, workers=1,
                      measure=None) -> Verdict:
    """Classify, simulate with the predicted scaling, fit, and judge."""
    m = MapSpec.lsv(gamma) if gamma > 0 else MapSpec.doubling()
    measure = default_measure(m) if measure is None else measure
    if obs is None:
        if variant is None:
            variant = "i" if 1.0 / alpha >= gamma else "ii"
        obs = regime_observable(gamma, alpha, x0, variant, measure)
    mean = float(O.expectation(obs, measure))
    drift = O.phi_eval(obs, 0.0) - mean
    reg = classify_regime(gamma, alpha, drift)
    b = n ** reg.scaling_exponent
    c = n * mean if alpha > 1.0 or reg.case == "ii" else 0.0
    cfg = EnsembleConfig(m, obs, n, samples, master_seed=seed, b_n=b, c_n=c, workers=workers)
    common = dict(gamma=gamma, alpha=alpha, x0=x0, case=reg.case,
                  predicted_index=reg.predicted_index, n=n, samples=samples, seed=seed,
                  boundary=reg.boundary, proven=reg.proven, drift=float(drift))
    try:
        ens = scaled_ensemble(cfg, measure)
        fit = ens.fit()
    except (EnsembleFailure, StableFitError) as exc:
        return Verdict(fitted_index=math.nan, fitted_beta=math.nan, ks=math.nan,
                       passed=False, error=str(exc), **common)
    ok = abs(fit.params.alpha - reg.predicted_index) <= tol_alpha and fit.ks <= tol_ks
    v = Verdict(fitted_index=fit.params.alpha, fitted_beta=fit.params.beta, ks=fit.ks,
                passed=bool(ok and not reg.boundary), **common)
    v.ensemble = ens
    v.fit = fit
    return v


SWEEP_COLUMNS = ["gamma", "alpha", "x0", "case", "predicted_index", "fitted_index",
                 "fitted_beta", "ks", "n", "samples", "seed", "pass"]


def _sweep_point(job):
    gamma, alpha, x0, n, samples, seed, tol_alpha, tol_ks = job
    try:
        v = regime_experiment(gamma, alpha, x0, n, samples, seed, tol_alpha=tol_alpha,
                              tol_ks=tol_ks)
    except Exception as exc:  # noqa: BLE001 - a failed point must not stop the sweep
        v = Verdict(gamma, alpha, x0, "error", math.nan, math.nan, math.nan, math.nan, n,
                    samples, seed, False, error=f"{type(exc).__name__}: {exc}")
    for attr in ("ensemble", "fit"):
        v.__dict__.pop(attr, None)
    return v


def phase_sweep(gamma_grid, alpha_grid, x0=0.7, n=100000, samples=5000, seed=0,
                tol_alpha=0.1, tol_ks=0.05, workers=1):
    """One verdict per grid point; per-point seeds are derived from the grid position."""
    if len(gamma_grid) == 0 or len(alpha_grid) == 0:
        raise ValueError("grids must be nonempty")
    jobs = []
    for i, g in enumerate(gamma_grid):
        for j, a in enumerate(alpha_grid):
            ss = np.random.SeedSequence(seed, spawn_key=(i, j))
            jobs.append((float(g), float(a), x0, n, samples, int(ss.generate_state(1)[0]),
                         tol_alpha, tol_ks))
    return pmap(_sweep_point, jobs, workers)


def write_sweep(verdicts, csv_path, json_path=None):
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for v in verdicts:
            w.writerow({k: (repr(x) if isinstance(x, float) else x) for k, x in v.row().items()})
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump([{**v.row(), "boundary": v.boundary, "proven": v.proven,
                        "drift": v.drift, "error": v.error} for v in verdicts], fh, indent=2)
