"""Monte Carlo checks of the small-jump covariance condition.

All lag statistics come from one long stationary orbit: E[Y_0 Y_j] is the
average of y_i y_{i+j} over i, and standard errors are batch means over 50
contiguous blocks of i.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from . import observables as O
from ._parallel import pmap
from .birkhoff import default_measure
from .dynamics import MapSpec, OrbitStream

N_BATCH = 50
CHUNK = 1 << 20


@dataclass(frozen=True)
class TruncationScales:
    epsilon: float
    n: int
    b_n: float
    psi_exponent: float = 0.75

    def __post_init__(self):
        if not 0.5 < self.psi_exponent < 1.0:
            raise ValueError("psi_exponent must lie in (1/2, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @property
    def level(self):
        """Small-jump truncation level eps * b_n."""
        return self.epsilon * self.b_n

    @property
    def u_n(self):
        return self.b_n ** self.psi_exponent

    @property
    def weight(self):
        return self.n / self.b_n ** 2


def truncation_scales(obs, eps, n, psi=0.75, measure=O.LEBESGUE):
    return TruncationScales(eps, n, O.scaling_bn(obs, measure, n), psi)


def default_jmax(n, k=10.0):
    return int(math.ceil(k * math.log(n)))


def orbit_values(m: MapSpec, obs, samples: int, seed=0, burn_in: int = 4096) -> np.ndarray:
    """phi along one stationary orbit of the given length."""
    if samples < 10 ** 4:
        raise ValueError("need samples >= 10^4")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    stream = OrbitStream(m, rng, burn_in)
    out = np.empty(samples)
    for s in range(0, samples, CHUNK):
        k = min(CHUNK, samples - s)
        O.eval_into(obs, stream.take(k), out[s:s + k])
    return out


def _truncate(values, level):
    return np.where(np.abs(values) < level, values, 0.0)


def _center(obs, measure, level, phin):
    if measure is not None:
        try:
            return O.truncated_expectation(obs, measure, level)
        except (ValueError, NotImplementedError):
            pass
    return float(phin.mean())


def _lag_moments(y, jmax):
    bm = K.lagged_products(np.ascontiguousarray(y), jmax, N_BATCH)
    return bm.mean(axis=1), bm.std(axis=1, ddof=1) / math.sqrt(N_BATCH)


@dataclass
class CovEstimate:
    value: float
    stderr: float

    @property
    def inconclusive(self):
        return self.stderr > abs(self.value)


def lag_covariances(obs, values, level, jmax, measure=None):
    """E[Y_0 Y_j] for j = 0..jmax with Y the centered truncated observable."""
    phin = _truncate(values, level)
    y = phin - _center(obs, measure, level, phin)
    if not np.any(y):
        z = np.zeros(jmax + 1)
        return z, z.copy()
    return _lag_moments(y, jmax)


def truncated_cov(m: MapSpec, obs, eps, n, j, samples=10 ** 6, seed=0, measure=None,
                  values=None) -> CovEstimate:
    """E[Y_1 Y_{1+j}] with Y = phi 1{|phi| <= eps b_n} - E[...]; j = 0 is the variance."""
    if not 0 <= j <= n:
        raise ValueError("need 0 <= j <= n")
    measure = default_measure(m) if measure is None else measure
    sc = truncation_scales(obs, eps, n, measure=measure)
    values = orbit_values(m, obs, samples, seed) if values is None else values
    c, s = lag_covariances(obs, values, sc.level, j, measure)
    return CovEstimate(float(c[j]), float(s[j]))


def truncated_second_moment(obs, measure, t: float) -> float:
    """E[phi^2 1{|phi| <= t}], exact for a bare single-term observable."""
    if not obs.is_single or (obs.holder is not None and obs.holder.pieces):
        raise NotImplementedError("exact second moment needs a single bare term")
    (a, c), = obs.terms
    sq = O.FrechetObservable.single(c, obs.alpha / 2.0, a * a, support=obs.support)
    return O.truncated_expectation(sq, measure, t * t)


def karamata_second_moment(obs, measure, level) -> float:
    """alpha/(2-alpha) * level^2 * mu(|phi| > level)."""
    a = obs.alpha
    return a / (2.0 - a) * level ** 2 * O.tail_prob(obs, measure, level)


@dataclass
class SmallJump:
    epsilon: float
    n: int
    b_n: float
    j_max: int
    statistic: float
    raw: float
    stderr: float
    variance_term: float
    second_moment: float
    karamata: float
    covariances: np.ndarray = field(repr=False)
    cov_stderr: np.ndarray = field(repr=False)

    @property
    def inconclusive_lags(self):
        return int(np.sum(self.cov_stderr[1:] > np.abs(self.covariances[1:])))


def small_jump_statistic(m: MapSpec, obs, eps, n, j_max=None, samples=10 ** 6, seed=0, k=10.0,
                         measure=None, values=None) -> SmallJump:
    """(n/b_n^2) sum_{j=1}^{j_max} max(0, cov_j) with the noise floor of max(0, .) removed.

    Under a zero true covariance, max(0, c_hat) has mean s/sqrt(2 pi), so that
    amount is subtracted lag by lag in total before clipping at zero; ``raw``
    keeps the plain sum.
    """
    measure = default_measure(m) if measure is None else measure
    sc = truncation_scales(obs, eps, n, measure=measure)
    jmax = default_jmax(n, k) if j_max is None else int(j_max)
    values = orbit_values(m, obs, samples, seed) if values is None else values
    c, s = lag_covariances(obs, values, sc.level, jmax, measure)
    phin = _truncate(values, sc.level)
    return _assemble(sc, jmax, c, s, float(np.mean(phin * phin)),
                     karamata_second_moment(obs, measure, sc.level))


def _assemble(sc, jmax, c, s, second, kar):
    c, s = c[:jmax + 1], s[:jmax + 1]
    w = sc.weight
    pos = np.maximum(c[1:], 0.0)
    stat = w * max(0.0, pos.sum() - s[1:].sum() / math.sqrt(2 * math.pi))
    return SmallJump(sc.epsilon, sc.n, sc.b_n, jmax, stat, w * pos.sum(),
                     w * math.sqrt(np.sum(s[1:] ** 2)), w * c[0], second, kar, c, s)


def tail_split_diagnostics(m: MapSpec, obs, eps, n, psi=0.75, samples=10 ** 6, seed=0, k=10.0,
                           measure=None, values=None) -> dict:
    """Empirical terms (I), (II)+(III) and the Cauchy-Schwarz bound on (II)+(III), all weighted by n/b_n^2.

    The bound per lag is 2 sqrt(E[phi_n^2]) sqrt(E[phi^2; |phi| < u_n]); it uses
    exact integrals for a bare single-term observable and orbit averages otherwise.
    """
    measure = default_measure(m) if measure is None else measure
    sc = truncation_scales(obs, eps, n, psi, measure)
    jmax = default_jmax(n, k)
    values = orbit_values(m, obs, samples, seed) if values is None else values
    a = np.abs(_truncate(values, sc.level))
    z = np.where(np.abs(values) >= sc.u_n, a, 0.0)
    tot, _ = _lag_moments(a, jmax)
    big, _ = _lag_moments(z, jmax)
    w = sc.weight
    term1 = w * big[1:].sum()
    rest = w * max(0.0, tot[1:].sum() - big[1:].sum())
    try:
        m_eps = truncated_second_moment(obs, measure, sc.level)
        m_u = truncated_second_moment(obs, measure, sc.u_n)
        source = "exact"
    except NotImplementedError:
        m_eps = float(np.mean(a * a))
        m_u = float(np.mean(np.where(np.abs(values) < sc.u_n, values * values, 0.0)))
        source = "orbit"
    per_lag = 2.0 * w * math.sqrt(m_eps) * math.sqrt(min(m_u, m_eps))
    return {"I": term1, "II_III": rest, "II_III_bound": jmax * per_lag,
            "II_III_bound_per_lag": per_lag, "u_n": sc.u_n, "j_max": jmax, "source": source}


TREND_COLUMNS = ["eps", "n", "statistic", "stderr", "raw", "variance_term", "I", "II_III_bound",
                 "statistic_k5", "statistic_k20"]


def _trend_cells(m, obs, eps, n, values, measure):
    sc = truncation_scales(obs, eps, n, measure=measure)
    c, s = lag_covariances(obs, values, sc.level, default_jmax(n, 20), measure)
    phin = _truncate(values, sc.level)
    second, kar = float(np.mean(phin * phin)), karamata_second_moment(obs, measure, sc.level)
    sj, k5, k20 = (_assemble(sc, default_jmax(n, k), c, s, second, kar) for k in (10, 5, 20))
    k5, k20 = k5.statistic, k20.statistic
    td = tail_split_diagnostics(m, obs, eps, n, values=values, measure=measure)
    return {"eps": eps, "n": n, "statistic": sj.statistic, "stderr": sj.stderr, "raw": sj.raw,
            "variance_term": sj.variance_term, "I": td["I"], "II_III_bound": td["II_III_bound"],
            "statistic_k5": k5, "statistic_k20": k20}


def trend_matrix(m: MapSpec, obs, eps_list=(0.5, 0.1, 0.02), n_list=(10 ** 4, 10 ** 5, 10 ** 6),
                 samples=10 ** 7, seed=0, measure=None, workers=1) -> list:
    """Rows of the (eps, n) trend matrix.

    Every cell reads the same orbit (common random numbers), so the eps-trend
    at fixed n is not blurred by independent noise between cells.
    """
    measure = default_measure(m) if measure is None else measure
    values = orbit_values(m, obs, samples, seed)
    cells = [(eps, n) for n in n_list for eps in eps_list]
    if workers and workers > 1:
        return pmap(_trend_shared, [(m, obs, e, n, values, measure) for e, n in cells], workers)
    return [_trend_cells(m, obs, e, n, values, measure) for e, n in cells]


def _trend_shared(job):
    return _trend_cells(*job)


def trend_checks(rows, tol_sigma=2.0) -> dict:
    """Nonincreasing-in-eps check at each n (within tol_sigma combined stderr)."""
    out = {}
    for n in sorted({r["n"] for r in rows}):
        rs = sorted((r for r in rows if r["n"] == n), key=lambda r: -r["eps"])
        ok = all(b["statistic"] <= a["statistic"] + tol_sigma * math.hypot(a["stderr"], b["stderr"])
                 for a, b in zip(rs, rs[1:]))
        out[n] = ok
    return out


def write_trend_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TREND_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k not in ("n",) else int(r[k])) for k in TREND_COLUMNS})
