"""Exceedances of a Frechet observable along an orbit, declustering and Poisson checks."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import observables as O
from .birkhoff import default_measure
from .dynamics import MapSpec, OrbitStream

CHUNK = 1 << 16


class EstimationFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class ExceedanceRecord:
    time_index: int
    value: float
    scaled_value: float


@dataclass
class Exceedances:
    """Exceedances of |phi| over ``threshold`` along one orbit of length ``n``.

    ``times`` are 1-based: time j refers to phi(T^(j-1) x).
    """
    times: np.ndarray
    values: np.ndarray
    threshold: float
    n: int
    b_n: float = 1.0
    c_n: float = 0.0

    @property
    def scaled(self):
        return (self.values - self.c_n / self.n) / self.b_n

    def __len__(self):
        return self.times.size

    def records(self):
        return [ExceedanceRecord(int(j), float(v), float(s))
                for j, v, s in zip(self.times, self.values, self.scaled)]

    def to_csv(self, path, cluster_ids=None):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["j", "value", "cluster_id"])
            ids = cluster_ids if cluster_ids is not None else [""] * len(self)
            for j, v, c in zip(self.times, self.values, ids):
                w.writerow([int(j), repr(float(v)), c])


def threshold_for(obs, measure, n, tau):
    """Level u with n mu(|phi| > u) = tau."""
    if not 0 < tau < n:
        raise ValueError("need 0 < tau < n")
    return O.scaling_bn(obs, measure, n / tau)


def exceedances(m: MapSpec, obs, n: int, u: float | None = None, seed=0, tau: float = 500.0,
                burn_in: int = 4096, measure=None) -> Exceedances:
    """Scan one orbit of length n for |phi| > u (u defaults to the level giving tau exceedances)."""
    measure = default_measure(m) if measure is None else measure
    if u is None:
        u = threshold_for(obs, measure, n, tau)
    if not u > 0:
        raise ValueError("threshold must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    stream = OrbitStream(m, rng, burn_in)
    times, vals = [], []
    done = 0
    buf = np.empty(CHUNK)
    while done < n:
        k = min(CHUNK, n - done)
        v = O.eval_into(obs, stream.take(k), buf[:k])
        hit = np.flatnonzero(np.abs(v) > u)
        times.append(hit + done + 1)
        vals.append(v[hit].copy())
        done += k
    try:
        b = O.scaling_bn(obs, measure, n)
    except ValueError:
        b = 1.0
    return Exceedances(np.concatenate(times).astype(np.int64), np.concatenate(vals), float(u), n, b)


@dataclass
class ClusterSet:
    clusters: list
    gap: int
    threshold: float
    n: int = 0

    @property
    def sizes(self):
        return np.array([len(c[0]) for c in self.clusters], dtype=np.int64)

    @property
    def starts(self):
        return np.array([c[0][0] for c in self.clusters], dtype=np.int64)

    @property
    def maxima(self):
        """Cluster representative: the value of largest modulus."""
        return np.array([c[1][np.argmax(np.abs(c[1]))] for c in self.clusters])

    def ratios(self):
        """Within-cluster values divided by the cluster representative, in [-1, 1]."""
        return [c[1] / c[1][np.argmax(np.abs(c[1]))] for c in self.clusters]

    def flatten(self) -> Exceedances:
        if not self.clusters:
            return Exceedances(np.zeros(0, dtype=np.int64), np.zeros(0), self.threshold, self.n)
        return Exceedances(np.concatenate([c[0] for c in self.clusters]),
                           np.concatenate([c[1] for c in self.clusters]), self.threshold, self.n)

    def cluster_ids(self):
        return np.repeat(np.arange(len(self.clusters)), self.sizes)

    def __eq__(self, other):
        if not isinstance(other, ClusterSet) or len(self.clusters) != len(other.clusters):
            return False
        return all(np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
                   for a, b in zip(self.clusters, other.clusters))


def default_gap(n):
    return int(math.ceil(math.log2(n)))


def declusterize(rec: Exceedances, gap: int) -> ClusterSet:
    """Runs declustering: records whose time gaps are <= gap share a cluster."""
    if gap < 1:
        raise ValueError("gap must be >= 1")
    t, v = np.asarray(rec.times), np.asarray(rec.values)
    if t.size == 0:
        return ClusterSet([], gap, rec.threshold, rec.n)
    cuts = np.flatnonzero(np.diff(t) > gap) + 1
    clusters = [(a, b) for a, b in zip(np.split(t, cuts), np.split(v, cuts))]
    return ClusterSet(clusters, gap, rec.threshold, rec.n)


@dataclass
class ExtremalIndex:
    theta: float
    stderr: float
    n_exceedances: int
    n_clusters: int
    method: str
    diagnostics: dict = field(default_factory=dict)


def _runs_theta(sizes):
    return sizes.size / sizes.sum()


def _blocks_theta(times, n, r):
    k = n // r
    N = int(np.sum(times <= k * r))
    Z = np.unique((times[times <= k * r] - 1) // r).size
    if Z >= k or N == 0:
        return math.nan
    return math.log(1.0 - Z / k) / (r * math.log(1.0 - N / n))


def extremal_index_from(rec: Exceedances, method: str = "runs", gap: int | None = None,
                        block: int | None = None, n_boot: int = 200, seed=0) -> ExtremalIndex:
    N = len(rec)
    if N < 200:
        raise EstimationFailure(f"only {N} exceedances; need >= 200")
    gap = default_gap(rec.n) if gap is None else gap
    rng = np.random.default_rng(seed)
    cs = declusterize(rec, gap)
    sizes = cs.sizes
    if method == "runs":
        theta = _runs_theta(sizes)
        boot = [_runs_theta(rng.choice(sizes, sizes.size)) for _ in range(n_boot)]
        diag = {"gap": gap}
    elif method == "blocks":
        r = int(math.ceil(math.sqrt(rec.n))) if block is None else block
        theta = _blocks_theta(rec.times, rec.n, r)
        k = rec.n // r
        counts = np.bincount((rec.times[rec.times <= k * r] - 1) // r, minlength=k)
        boot = []
        for _ in range(n_boot):
            c = counts[rng.integers(0, k, k)]
            Z, Nb = np.count_nonzero(c), c.sum()
            boot.append(math.log(1 - Z / k) / (r * math.log(1 - Nb / rec.n)) if 0 < Z < k else math.nan)
        diag = {"block": r}
    else:
        raise ValueError("method must be 'runs' or 'blocks'")
    return ExtremalIndex(float(min(theta, 1.0)), float(np.nanstd(boot, ddof=1)), N, len(cs.clusters),
                         method, diag)


def extremal_index(m: MapSpec, obs, n: int, u: float | None = None, method: str = "runs",
                   seed=0, tau: float = 500.0, **kw) -> ExtremalIndex:
    rec = exceedances(m, obs, n, u, seed, tau)
    return extremal_index_from(rec, method, seed=seed, **kw)


def dispersion_index(times, n, k: int = 200) -> float:
    """Variance over mean of event counts in k equal sub-blocks of [1, n]."""
    counts = np.bincount(((np.asarray(times) - 1) * k) // n, minlength=k)[:k]
    return float(counts.var(ddof=1) / counts.mean()) if counts.mean() > 0 else math.nan


def _gap_ks(t):
    m = t.shape[-1]
    g = np.sort(np.diff(t, axis=-1, prepend=0.0) * m, axis=-1)  # fitted rate m on [0, 1]
    F = 1.0 - np.exp(-g)
    i = np.arange(1, m + 1)
    return np.maximum((i / m - F).max(axis=-1), (F - (i - 1) / m).max(axis=-1))


def poisson_test(cs: ClusterSet, n: int, k: int = 50, n_null: int = 999, seed=0) -> dict:
    """KS of rescaled inter-arrival gaps against the exponential, plus a dispersion index.

    The rate is fitted, so the p-value comes from the exact conditional null
    (given the count, Poisson arrival times are iid uniform), simulated.
    """
    C = len(cs.clusters)
    if C < 50:
        raise EstimationFailure(f"only {C} clusters; need >= 50")
    t = np.sort(cs.starts / n)
    d = float(_gap_ks(t))
    rng = np.random.default_rng(seed)
    null = _gap_ks(np.sort(rng.random((n_null, C)), axis=1))
    p = (1.0 + np.sum(null >= d)) / (1.0 + n_null)
    return {"ks_stat": d, "p_value": float(p), "rate": C / n,
            "asymptotic_p_value": float(stats.kstwo.sf(d, C)),
            "dispersion": dispersion_index(cs.starts, n, k), "n_clusters": C}
