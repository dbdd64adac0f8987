"""Inducing laboratory for LSV maps.

Splits phi into the part on the base Y and the part off it, builds the
induced observables on the first-return map F, and checks the pieces of the
lifting argument: the return-time law, the discrepancy terms V_n and W_n, the
window statistic of the case-(iii) argument and the bookkeeping identity that
ties them together.

Index convention: every sum runs over j in [0, N) with N = floor(Rbar n), and
R_n is the time of the n-th return, so sum_{j < R_n} phi_2 o T^j equals
sum_{k < n} Phi_2 o F^k exactly.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import observables as O
from ._parallel import pmap, split
from .birkhoff import (EnsembleConfig, SumEnsemble, classify_regime, default_measure,
                       regime_experiment, regime_observable)
from .dynamics import (ExcursionCapError, InducedSystem, MapSpec, OrbitStream,
                       first_return_system, return_time_sequence, sample_rng)
from .stablelaw import EmpiricalDistribution, StableFitError, fit_stable

CHUNK = 1 << 16
MAX_ORBIT = 1 << 28


class DecompositionError(ValueError):
    pass


@dataclass
class Decomposition:
    """phi = phi_1 + phi_2 on Y^c and Y, and phi_1 - E[phi_1] = g + psi."""
    obs: O.FrechetObservable
    y_lo: float
    phi1: O.FrechetObservable
    phi2: O.FrechetObservable
    mu_Y: float
    E_phi: float
    E_phi1: float
    E_phi2: float
    phi_at_0: float
    map: MapSpec | None = None
    measure: object = field(default=None, repr=False)

    @property
    def drift(self):
        """phi(0) - E[phi_1], the height of g off the base."""
        return self.phi_at_0 - self.E_phi1

    @property
    def R_bar(self):
        return 1.0 / self.mu_Y

    @property
    def g_values(self):
        """(value off Y, value on Y)."""
        A = self.drift
        return A, A - A / self.mu_Y

    def g(self, x):
        off, on = self.g_values
        return np.where(np.asarray(x) >= self.y_lo, on, off)

    def pieces(self, xs, vals):
        """phi_1, phi_2, g and psi along an orbit, from phi values already computed."""
        inY = xs >= self.y_lo
        p1 = np.where(inY, 0.0, vals)
        p2 = np.where(inY, vals, 0.0)
        off, on = self.g_values
        g = np.where(inY, on, off)
        return p1, p2, g, p1 - self.E_phi1 - g

    def psi(self, x):
        x = np.asarray(x, dtype=float)
        return self.pieces(x, O.phi_eval(self.obs, x))[3]

    psi_obs = psi

    def to_dict(self):
        return {"y_lo": self.y_lo, "mu_Y": self.mu_Y, "R_bar": self.R_bar, "E_phi": self.E_phi,
                "E_phi1": self.E_phi1, "E_phi2": self.E_phi2, "phi_at_0": self.phi_at_0,
                "g_values": list(self.g_values), "observable": self.obs.to_dict()}


def decompose(obs: O.FrechetObservable, sys: InducedSystem, measure=None, tol=1e-9) -> Decomposition:
    measure = default_measure(sys.map) if measure is None else measure
    for c in obs.centers:
        if c < sys.y_lo:
            raise DecompositionError(f"center {c} lies outside Y = [{sys.y_lo}, 1]")
    Y, Yc = [(sys.y_lo, 1.0)], [(0.0, sys.y_lo)]
    E1 = float(O.integrate_over(obs, measure, Yc))
    E2 = float(O.integrate_over(obs, measure, Y))
    mu_Y = float(O.measure_of(measure, Y))
    dec = Decomposition(obs, sys.y_lo, obs.restricted(Yc), obs.restricted(Y), mu_Y, E1 + E2, E1, E2,
                        obs.value_at_zero(), sys.map, measure)
    # E[g] and psi(0) vanish by construction; checked so that a bad split fails loudly
    off, on = dec.g_values
    Eg = off * (1.0 - mu_Y) + on * mu_Y
    scale = max(1.0, abs(dec.drift))
    if abs(Eg) > tol * scale / mu_Y or abs(float(dec.psi(0.0))) > tol * scale:
        raise DecompositionError("decomposition invariants violated")
    if math.isfinite(E2):
        whole = float(O.expectation(obs, measure))
        if not math.isclose(whole, E1 + E2, rel_tol=1e-7, abs_tol=1e-9):
            raise DecompositionError(f"E[phi1] + E[phi2] = {E1 + E2} but E[phi] = {whole}")
    return dec


def base_system(m: MapSpec, count: int = 20000, seed=0) -> InducedSystem:
    """First-return system on the standard base Y = [1/2, 1]."""
    return first_return_system(m, 0.75, default_measure(m), count, seed)


# ---------------------------------------------------------------- orbit bookkeeping

def _orbit_from_base(m: MapSpec, y_lo, rng, n_returns, length, start=None, burn_in=4096):
    """Orbit starting at a point of Y, long enough for n_returns returns and `length` points.

    Returns (xs, hit_times) with hit_times[k] the time of the (k+1)-th return.
    """
    stream = OrbitStream(m, rng, burn_in if start is None else 0, start=start)
    head = stream.take(CHUNK)
    first = np.flatnonzero(head >= y_lo)
    while first.size == 0:
        head = stream.take(CHUNK)
        first = np.flatnonzero(head >= y_lo)
    parts = [head[first[0]:]]
    total = parts[0].size
    hits = np.flatnonzero(parts[0][1:] >= y_lo) + 1
    nh = hits.size
    hit_parts = [hits]
    while nh < n_returns or total < length + 1:
        if total > MAX_ORBIT:
            raise ExcursionCapError(f"orbit longer than {MAX_ORBIT} points")
        xs = stream.take(CHUNK)
        h = np.flatnonzero(xs >= y_lo) + total
        parts.append(xs)
        hit_parts.append(h)
        nh += h.size
        total += xs.size
    return np.concatenate(parts), np.concatenate(hit_parts)


@dataclass
class IdentityCheck:
    n: int
    N: int
    R_n: int
    direct: float
    assembled: float
    terms: dict
    scale: float

    @property
    def rel_error(self):
        return abs(self.direct - self.assembled) / self.scale


def representation_identity(dec: Decomposition, n: int, seed=0, start=None) -> IdentityCheck:
    """Direct sum_{j<N}(phi o T^j - E[phi]) against the assembled right-hand side.

    Assembled = sum_k (Phi_2 o F^k - Rbar E[phi_2]) + sum_{j<N} psi o T^j
                + (phi(0) - E[phi_1] - E[phi_2]) (R_n - n Rbar) + V_n + W_n.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    m = dec.map
    N = int(math.floor(dec.R_bar * n))
    rng = sample_rng(seed, 0) if not isinstance(seed, np.random.Generator) else seed
    xs, hits = _orbit_from_base(m, dec.y_lo, rng, n, N, start)
    R_n = int(hits[n - 1])
    L = max(N, R_n)
    xs = xs[:L]
    vals = O.phi_eval(dec.obs, xs)
    p1, p2, g, psi = dec.pieces(xs, vals)
    direct_terms = vals[:N] - dec.E_phi
    direct = math.fsum(direct_terms)
    starts = np.concatenate([[0], hits[:n - 1]])
    Phi2 = np.add.reduceat(p2[:R_n], starts)  # induced observable, one value per excursion
    t1 = math.fsum(Phi2 - dec.R_bar * dec.E_phi2)
    t2 = math.fsum(psi[:N])
    t3 = (dec.drift - dec.E_phi2) * (R_n - n * dec.R_bar)
    lo, hi = min(R_n, N), max(R_n, N)
    sign = 1.0 if R_n <= N else -1.0
    V = sign * math.fsum(g[lo:hi])
    W = sign * math.fsum(p2[lo:hi] - dec.E_phi2)
    assembled = math.fsum([t1, t2, t3, V, W])
    scale = max(1.0, math.fsum(np.abs(direct_terms)), math.fsum(np.abs(Phi2)) + abs(t3))
    return IdentityCheck(n, N, R_n, direct, assembled,
                         {"induced": t1, "psi": t2, "return_time": t3, "V": V, "W": W}, scale)


# ---------------------------------------------------------------- induced ensembles

def _induced_chunk(job):
    m, y_lo, obs, n, seed, lo, hi = job
    sums = np.empty(hi - lo)
    rsum = np.empty(hi - lo, dtype=np.int64)
    for i in range(lo, hi):
        xs, hits = _orbit_from_base(m, y_lo, sample_rng(seed, i), n, 0)
        R_n = int(hits[n - 1])
        starts = np.concatenate([[0], hits[:n - 1]])
        vals = O.phi_eval(obs, xs[:R_n])
        phi2 = np.where(xs[:R_n] >= y_lo, vals, 0.0)
        sums[i - lo] = math.fsum(np.add.reduceat(phi2, starts))
        rsum[i - lo] = R_n
    return sums, rsum


def _induced_raw(dec, sys, n, samples, seed, workers):
    ranges = split(samples, max(1, workers) * 4 if workers > 1 else 1)
    jobs = [(sys.map, sys.y_lo, dec.obs, n, seed, lo, hi) for lo, hi in ranges]
    parts = pmap(_induced_chunk, jobs, workers)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def induced_sum_ensemble(dec: Decomposition, sys: InducedSystem, n: int, samples: int, seed=0,
                         workers=1) -> SumEnsemble:
    """(n Rbar)^(-1/alpha) sum_{k<n} (Phi_2 o F^k - Rbar E[phi_2]); no centering for alpha < 1."""
    alpha = dec.obs.alpha
    if alpha is None:
        raise ValueError("induced ensemble needs a singular observable")
    b = (n * dec.R_bar) ** (1.0 / alpha)
    c = n * dec.R_bar * dec.E_phi2 if alpha > 1.0 else 0.0
    sums, rsum = _induced_raw(dec, sys, n, samples, seed, workers)
    cfg = EnsembleConfig(sys.map, dec.phi2, n, samples, master_seed=seed, b_n=b, c_n=c,
                         workers=workers)
    prov = {"experiment": "induced_sum_ensemble", "seed": seed, "n": n, "samples": samples,
            "map": sys.map.to_dict(), "y_lo": sys.y_lo}
    ens = SumEnsemble(EmpiricalDistribution((sums - c) / b, prov), sums, cfg,
                      {"b_n": b, "c_n": c, "return_time_mean": float(rsum.mean() / n)})
    return ens


def induced_calibration(dec: Decomposition, sys: InducedSystem, count=200000, seed=0, t_list=()):
    """E_{mu_Y}[Phi_2] against E[phi_2]/mu(Y), and mu_Y(Phi_2 > t) against mu(phi_2 > t)/mu(Y).

    Phi_2 is summed along each excursion; the points are successive returns of
    one orbit, which equidistribute with respect to mu_Y.
    """
    xs, hits = _orbit_from_base(sys.map, sys.y_lo, sample_rng(seed, 0), count + 1, 0)
    R = int(hits[count - 1])
    starts = np.concatenate([[0], hits[:count - 1]])
    vals = O.phi_eval(dec.obs, xs[:R])
    Phi2 = np.add.reduceat(np.where(xs[:R] >= sys.y_lo, vals, 0.0), starts)
    nb = 50
    blen = Phi2.size // nb
    bm = Phi2[:nb * blen].reshape(nb, blen).mean(axis=1)
    tails = []
    for t in t_list:
        emp = float(np.mean(Phi2 > t))
        pred = O.tail_prob(dec.phi2.restricted([(0.0, 1.0)]), dec.measure, t) / dec.mu_Y
        tails.append({"t": t, "empirical": emp, "predicted": pred,
                      "stderr": math.sqrt(max(pred * (1 - pred), 1e-300) / Phi2.size)})
    return {"mean": float(Phi2.mean()), "stderr": float(bm.std(ddof=1) / math.sqrt(nb)),
            "predicted_mean": dec.E_phi2 / dec.mu_Y, "tails": tails}


# ---------------------------------------------------------------- return times

@dataclass
class ReturnTimeCheck:
    gamma: float
    n: int
    predicted_index: float
    fit: object
    ensemble: np.ndarray = field(repr=False)

    @property
    def fitted_index(self):
        return self.fit.params.alpha


def _return_chunk(job):
    m, y_lo, n, seed, lo, hi = job
    out = np.empty(hi - lo)
    sys = InducedSystem(m, y_lo, 0, [], 1.0, math.nan, math.nan)
    for i in range(lo, hi):
        _, rts = return_time_sequence(sys, m, sample_rng(seed, i), n)
        out[i - lo] = float(rts.sum())
    return out


def return_time_sums(m: MapSpec, y_lo, n, samples, seed=0, workers=1) -> np.ndarray:
    ranges = split(samples, max(1, workers) * 4 if workers > 1 else 1)
    return np.concatenate(pmap(_return_chunk, [(m, y_lo, n, seed, lo, hi) for lo, hi in ranges],
                               workers))


def return_time_stable_check(gamma, n, samples, seed=0, workers=1, sys=None) -> ReturnTimeCheck:
    """Fit a stable law to (R_n - n Rbar)/n^gamma (sqrt(n) scaling when gamma < 1/2)."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    m = MapSpec.lsv(gamma)
    sys = base_system(m, seed=seed) if sys is None else sys
    expo = gamma if gamma > 0.5 else 0.5
    R = return_time_sums(m, sys.y_lo, n, samples, seed, workers)
    z = (R - n * sys.kac_return) / n ** expo
    fit = fit_stable(EmpiricalDistribution(z, {"experiment": "return_time", "gamma": gamma,
                                               "n": n, "seed": seed}))
    pred = 1.0 / gamma if gamma > 0.5 else 2.0
    return ReturnTimeCheck(gamma, n, pred, fit, z)


def return_tail_slope(gamma, count=10 ** 6, seed=0, k_min=20, min_count=200) -> dict:
    """Log-log slope of P(R > k) for the first return to [1/2, 1], fitted on k >= k_min."""
    m = MapSpec.lsv(gamma)
    sys = InducedSystem(m, 0.5, 0, [], 1.0, math.nan, math.nan)
    _, rts = return_time_sequence(sys, m, seed, count)
    r = np.sort(rts)
    ks = np.unique(np.round(np.geomspace(k_min, r[-1], 60)).astype(np.int64))
    surv = 1.0 - np.searchsorted(r, ks, side="right") / r.size
    keep = surv * r.size >= min_count
    ks, surv = ks[keep], surv[keep]
    if ks.size < 5:
        raise ValueError("too few tail points; raise count")
    slope, _ = np.polyfit(np.log(ks), np.log(surv), 1)
    return {"slope": float(slope), "predicted": -1.0 / gamma, "k_range": [int(ks[0]), int(ks[-1])],
            "count": count}


# ---------------------------------------------------------------- gates and windows

def dgm_gate(gamma, alpha) -> dict:
    """Case-(iii) window 1/gamma < alpha < 1 + 1/gamma^2 - 1/gamma, with p = alpha gamma."""
    lo = 1.0 / gamma if gamma > 0 else math.inf
    hi = 1.0 + 1.0 / gamma ** 2 - 1.0 / gamma if gamma > 0 else -math.inf
    p = alpha * gamma
    reasons = []
    binding = None
    if lo >= 2.0:
        reasons.append(f"1/gamma = {lo:g} >= 2 > alpha: case (iii) is empty")
        binding = "lower"
    elif alpha <= lo:
        reasons.append(f"alpha = {alpha:g} <= 1/gamma = {lo:g}")
        binding = "lower"
    elif alpha >= hi:
        reasons.append(f"alpha = {alpha:g} >= 1 + 1/gamma^2 - 1/gamma = {hi:g}")
        binding = "upper"
    dgm_ok = 1.0 < p <= 2.0 and 0.0 < gamma < 1.0 / p
    if binding is None and not dgm_ok:
        reasons.append(f"p = alpha gamma = {p:g} violates 1 < p <= 2, gamma < 1/p")
    return {"admissible": binding is None, "p": p, "window": [lo, hi], "binding": binding,
            "dgm_conditions": dgm_ok, "reasons": reasons}


def lil_window_check(gamma, alpha, dec: Decomposition, n_list, seed=0, orbits=200) -> dict:
    """Median over orbits of max_{k <= ceil(n^gamma)} |sum_{j<k}(phi_2 o T^j - E[phi_2])| / n^(1/alpha).

    The logarithmic factor of the almost-sure bound is left out.
    """
    gate = dgm_gate(gamma, alpha) if gamma > 0 else {"admissible": True, "reasons": []}
    m = dec.map
    rows = []
    for k, n in enumerate(n_list):
        w = max(1, int(math.ceil(n ** gamma)))
        stat = np.empty(orbits)
        for i in range(orbits):
            stream = OrbitStream(m, sample_rng(seed, k * orbits + i))
            xs = stream.take(w)
            p2 = dec.pieces(xs, O.phi_eval(dec.obs, xs))[1]
            stat[i] = np.max(np.abs(np.cumsum(p2 - dec.E_phi2))) / n ** (1.0 / alpha)
        rows.append({"n": int(n), "window": w, "statistic": float(np.median(stat))})
    s = [r["statistic"] for r in rows]
    decreasing = all(b < a for a, b in zip(s, s[1:]))
    return {"rows": rows, "decreasing": decreasing, "gate": gate,
            "anomaly": bool(gate["admissible"] and not decreasing)}


def discrepancy_check(dec: Decomposition, sys: InducedSystem, gamma, n, samples, seed=0,
                      deltas=(0.1, 0.25, 0.5, 1.0)) -> dict:
    """Distributions of W_n/n^gamma, V_n/n^gamma and (R_n - n Rbar)/n^gamma."""
    N = int(math.floor(dec.R_bar * n))
    W = np.empty(samples)
    V = np.empty(samples)
    F = np.empty(samples)
    for i in range(samples):
        xs, hits = _orbit_from_base(sys.map, sys.y_lo, sample_rng(seed, i), n, N)
        R_n = int(hits[n - 1])
        lo, hi = min(R_n, N), max(R_n, N)
        seg = xs[lo:hi]
        _, p2, g, _ = dec.pieces(seg, O.phi_eval(dec.obs, seg))
        sign = 1.0 if R_n <= N else -1.0
        W[i] = sign * math.fsum(p2 - dec.E_phi2)
        V[i] = sign * math.fsum(g)
        F[i] = R_n - n * dec.R_bar
    s = n ** gamma
    q = lambda v: float(np.subtract(*np.quantile(v, [0.75, 0.25])))
    return {"n": n, "W": W / s, "V": V / s, "R": F / s,
            "P_W": {d: float(np.mean(np.abs(W) / s > d)) for d in deltas},
            "P_V": {d: float(np.mean(np.abs(V) / s > d)) for d in deltas},
            "iqr_R": q(F / s)}


def psi_negligibility(dec: Decomposition, gamma, n_list, samples=200, seed=0) -> dict:
    """IQR of n^(-kappa) sum_{j<n} psi o T^j, kappa = max(gamma, 1/alpha)."""
    kappa = max(gamma, 1.0 / dec.obs.alpha)
    rows = []
    for k, n in enumerate(n_list):
        s = np.empty(samples)
        for i in range(samples):
            xs = OrbitStream(dec.map, sample_rng(seed, k * samples + i)).take(n)
            s[i] = math.fsum(dec.pieces(xs, O.phi_eval(dec.obs, xs))[3]) / n ** kappa
        q1, q3 = np.quantile(s, [0.25, 0.75])
        rows.append({"n": int(n), "iqr": float(q3 - q1)})
    return {"kappa": kappa, "rows": rows}


# ---------------------------------------------------------------- end to end

@dataclass
class LiftVerdict:
    variant: str
    gamma: float
    alpha: float
    x0: float
    direct_fit: dict
    induced_fit: dict
    ks_between: float
    gate_status: dict
    passed: bool
    notes: list = field(default_factory=list)

    def to_json(self):
        return json.dumps({"variant": self.variant, "gamma": self.gamma, "alpha": self.alpha,
                           "x0": self.x0, "direct_fit": self.direct_fit,
                           "induced_fit": self.induced_fit, "ks_between": self.ks_between,
                           "gate_status": self.gate_status, "pass": self.passed,
                           "notes": self.notes}, indent=2)


def _fit_dict(fit):
    if fit is None:
        return {}
    d = fit.params.to_dict()
    d["ks"] = fit.ks
    return d


def end_to_end_lift(gamma, alpha, x0, variant, n=100000, samples=2000, seed=0, tol_alpha=0.12,
                    tol_ks=0.05, workers=1) -> LiftVerdict:
    """Original-map ensemble against the induced phi_2 ensemble over the same time span."""
    m = MapSpec.lsv(gamma)
    measure = default_measure(m)
    obs = regime_observable(gamma, alpha, x0, variant, measure)
    sys = first_return_system(m, x0, measure, 20000, seed)
    dec = decompose(obs, sys, measure)
    direct = regime_experiment(gamma, alpha, x0, n, samples, seed, obs=obs, tol_alpha=tol_alpha,
                               tol_ks=1.0, workers=workers, measure=measure)
    n_ind = max(1, int(round(n / dec.R_bar)))
    notes = []
    try:
        ind = induced_sum_ensemble(dec, sys, n_ind, samples, seed + 1, workers)
        ifit = ind.fit()
    except StableFitError as exc:
        ind, ifit = None, None
        notes.append(f"induced fit failed: {exc}")
    reg = classify_regime(gamma, alpha, direct.drift)
    gate = dgm_gate(gamma, alpha)
    ks = math.nan
    ok = ifit is not None and math.isfinite(direct.fitted_index)
    if ok and reg.case in ("i", "iii"):
        ks = float(stats.ks_2samp(direct.ensemble.values.samples, ind.values.samples).statistic)
        ok = (abs(direct.fitted_index - alpha) <= tol_alpha
              and abs(ifit.params.alpha - alpha) <= tol_alpha and ks <= tol_ks)
    elif ok and reg.case == "ii":
        ok = (abs(direct.fitted_index - 1.0 / gamma) <= tol_alpha
              and abs(ifit.params.alpha - alpha) <= tol_alpha)
        notes.append("case ii: the return-time term sets the original-map law; "
                     "the induced phi_2 law keeps index alpha")
    else:
        ok = False
    return LiftVerdict(variant, gamma, alpha, x0, _fit_dict(getattr(direct, "fit", None)),
                       _fit_dict(ifit), ks, gate, bool(ok), notes)
