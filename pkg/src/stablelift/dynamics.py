"""Interval maps, orbits, invariant densities and first-return systems.

Two maps are supported: the doubling map and the Liverani-Saussol-Vaienti
intermittent map

    T(x) = x (1 + 2^g x^g)   on [0, 1/2),     T(x) = 2x - 1   on [1/2, 1],

which reduces to the doubling map at ``g = 0``.

Orbits of dyadic maps cannot be iterated in floating point (every double
collapses onto 0 after at most 1075 steps), so the doubling map and LSV at
``g = 0`` read their orbits off a stream of random bits instead: the j-th
iterate is the 53-bit window starting at bit j, which is the exact orbit of a
Lebesgue-typical point, rounded down to double precision.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from . import _kernels as K

DEFAULT_BURN_IN = 4096
DEFAULT_CHUNK = 1 << 16


class ConvergenceError(RuntimeError):
    pass


class ExcursionCapError(RuntimeError):
    pass


@dataclass(frozen=True)
class MapSpec:
    kind: str
    gamma: float = 0.0
    description: str = ""

    def __post_init__(self):
        if self.kind not in ("doubling", "lsv"):
            raise ValueError(f"unknown map kind {self.kind!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.kind == "doubling" and self.gamma != 0.0:
            raise ValueError("the doubling map takes no gamma")

    @classmethod
    def doubling(cls):
        return cls("doubling", 0.0, "x -> 2x mod 1")

    @classmethod
    def lsv(cls, gamma):
        return cls("lsv", float(gamma), f"LSV intermittent map, gamma={gamma}")

    @property
    def dyadic(self) -> bool:
        return self.gamma == 0.0

    def to_dict(self):
        return {"kind": self.kind, "gamma": self.gamma}


def map_apply(m: MapSpec, x):
    """T(x). Scalars in, scalar out; arrays are mapped elementwise."""
    xa = np.asarray(x, dtype=float)
    if np.any((xa < 0.0) | (xa > 1.0)) or np.any(np.isnan(xa)):
        raise ValueError("map_apply needs x in [0, 1]")
    left = xa < 0.5
    out = np.where(left, xa * (1.0 + (2.0 * xa) ** m.gamma), 2.0 * xa - 1.0)
    return float(out) if out.ndim == 0 else out


def left_branch(gamma, x):
    return x * (1.0 + (2.0 * x) ** gamma)


def left_branch_preimage(m: MapSpec, y: float, j: int = 1, max_iter: int = 200) -> float:
    """x in [0, 1/2] with T_L^j(x) = y, where T_L is the left branch."""
    if not 0.0 < y < 1.0:
        raise ValueError("y must lie in (0, 1)")
    if j < 1:
        raise ValueError("depth j must be >= 1")
    g = m.gamma
    x = y
    for _ in range(j):
        x = _invert_left(g, x, max_iter)
    return x


def _invert_left(g, y, max_iter):
    lo, hi = 0.0, 0.5
    it = 0
    while hi - lo > 1e-14:
        mid = 0.5 * (lo + hi)
        if left_branch(g, mid) < y:
            lo = mid
        else:
            hi = mid
        it += 1
        if it > max_iter:
            raise ConvergenceError(f"bisection budget exceeded inverting y={y}")
    x = 0.5 * (lo + hi)
    for _ in range(3):
        f = left_branch(g, x) - y
        df = 1.0 + (g + 1.0) * (2.0 * x) ** g
        x_new = x - f / df
        if lo - 1e-14 <= x_new <= hi + 1e-14:
            x = x_new
    return x


def ladder_partition(m: MapSpec, M: int):
    """Rungs B_0..B_M with B_j = [T_L^{-j-1}(1/2), T_L^{-j}(1/2)].

    B_0 sits just below 1/2 and the rungs descend toward 0.
    """
    if M < 0:
        raise ValueError("M must be >= 0")
    pts = [0.5]
    for _ in range(M + 1):
        pts.append(_invert_left(m.gamma, pts[-1], 200))
    return [(pts[j + 1], pts[j]) for j in range(M + 1)]


# ---------------------------------------------------------------- orbits

def sample_rng(master_seed, index) -> np.random.Generator:
    """Independent generator for sample ``index``; independent of worker layout."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.PCG64(ss))


class OrbitStream:
    """Sequential orbit reader; ``take(m)`` returns the next m iterates.

    For dyadic maps ``start`` (test hook) seeds the bit stream with the binary
    expansion of a given double followed by zeros.
    """

    def __init__(self, m: MapSpec, rng: np.random.Generator, burn_in=DEFAULT_BURN_IN,
                 start=None):
        if burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        self.map = m
        self._rng = rng
        if m.dyadic:
            if start is None:
                self._words = rng.bit_generator.random_raw(4)
                self._fixed = False
            else:
                if not 0.0 <= start < 1.0:
                    raise ValueError("start must lie in [0, 1)")
                self._words = np.array([int(math.ldexp(start, 64)), 0, 0, 0], dtype=np.uint64)
                self._fixed = True
            self._pos = 0
            self._advance(burn_in)
        else:
            if start is None:
                start = (float(rng.integers(0, 1 << 53)) + 0.5) * 2.0 ** -53
            self._x = K.lsv_burn(float(start), m.gamma, int(burn_in))

    def _ensure(self, nbits):
        need = (self._pos + nbits + 63) // 64 + 2
        have = self._words.size
        if need > have:
            if self._fixed:
                extra = np.zeros(need - have, dtype=np.uint64)
            else:
                extra = self._rng.bit_generator.random_raw(need - have)
            self._words = np.concatenate([self._words, extra])

    def _advance(self, k):
        self._ensure(k)
        self._pos += k
        drop = self._pos // 64
        if drop:
            self._words = self._words[drop:]
            self._pos -= 64 * drop

    def take(self, m: int) -> np.ndarray:
        out = np.empty(m)
        if self.map.dyadic:
            self._ensure(m)
            K.dyadic_chunk(self._words, self._pos, m, out)
            self._advance(m)
        else:
            self._x = K.lsv_chunk(self._x, self.map.gamma, m, out)
        return out


def iterate_orbit(m: MapSpec, seed, n: int, burn_in: int = DEFAULT_BURN_IN, start=None,
                  chunk: int = DEFAULT_CHUNK):
    """Yield the n iterates after burn-in, in chunks of at most ``chunk`` values."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    stream = OrbitStream(m, rng, burn_in, start)
    done = 0
    while done < n:
        k = min(chunk, n - done)
        yield stream.take(k)
        done += k


def orbit(m: MapSpec, seed, n: int, burn_in: int = DEFAULT_BURN_IN, start=None) -> np.ndarray:
    return np.concatenate(list(iterate_orbit(m, seed, n, burn_in, start)))


# ---------------------------------------------------------------- densities

@dataclass
class DensityEstimate:
    bin_edges: np.ndarray
    mass: np.ndarray
    method: str
    iterations_or_rank: int
    residual: float = float("nan")

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=float)
        self.mass = np.asarray(self.mass, dtype=float)
        if np.any(self.mass < 0):
            raise ValueError("negative bin mass")
        if abs(self.mass.sum() - 1.0) > 1e-12:
            raise ValueError("bin masses must sum to 1")

    @property
    def bins(self):
        return self.mass.size

    @property
    def heights(self):
        return self.mass / np.diff(self.bin_edges)

    def density(self, x):
        x = np.asarray(x, dtype=float)
        i = np.clip(np.searchsorted(self.bin_edges, x, side="right") - 1, 0, self.bins - 1)
        return self.heights[i]

    def value_at_point(self, x0: float) -> float:
        """Density at x0, averaging the two bins that meet there when x0 is an edge."""
        e = self.bin_edges
        i = np.searchsorted(e, x0)
        if i < e.size and np.isclose(e[i], x0, rtol=0, atol=1e-15) and 0 < i < e.size - 1:
            return 0.5 * (self.heights[i - 1] + self.heights[i])
        return float(self.density(x0))

    def mass_between(self, lo: float, hi: float) -> float:
        if hi <= lo:
            return 0.0
        e = self.bin_edges
        cum = np.concatenate([[0.0], np.cumsum(self.mass)])

        def cdf(x):
            i = int(np.clip(np.searchsorted(e, x, side="right") - 1, 0, self.bins - 1))
            return cum[i] + self.heights[i] * (min(x, e[i + 1]) - e[i])

        return float(cdf(min(hi, e[-1])) - cdf(max(lo, e[0])))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_left", "bin_right", "mass"])
            for a, b, m in zip(self.bin_edges[:-1], self.bin_edges[1:], self.mass):
                w.writerow([repr(float(a)), repr(float(b)), repr(float(m))])


def lebesgue_density(bins: int = 1) -> DensityEstimate:
    return DensityEstimate(np.linspace(0.0, 1.0, bins + 1), np.full(bins, 1.0 / bins),
                           "UlamMatrix", 0, 0.0)


def _left_inverse(gamma, y, iters=60):
    """Vectorized T_L^{-1}(y) by Newton's method, to relative precision near 0."""
    y = np.asarray(y, dtype=float)
    c = 2.0 ** gamma
    # y / (1 + (2y)^g) lies below the root and f is convex: one overshoot, then monotone
    x = y / (1.0 + (2.0 * y) ** gamma)
    for _ in range(iters):
        x = x - (x + c * x ** (1.0 + gamma) - y) / (1.0 + (1.0 + gamma) * c * x ** gamma)
    return x


def graded_edges(bins: int, grading: float, floor: float = 1e-20) -> np.ndarray:
    """Bin edges with width min(1/bins, grading * x) on [0, 1/2] and uniform on [1/2, 1].

    A uniform grid resolves the x^-gamma cusp at the neutral fixed point only
    at rate bins^-(1-gamma); geometric cells near 0 restore first-order accuracy.
    """
    if bins < 16 or bins % 2:
        raise ValueError("bins must be an even integer >= 16")
    if not 0.0 < grading < 1.0:
        raise ValueError("grading must lie in (0, 1)")
    pts = [0.5]
    x = 0.5
    while x > floor:
        x -= min(1.0 / bins, grading * x)
        pts.append(x)
    pts[-1] = 0.0
    return np.concatenate([pts[::-1], np.linspace(0.5, 1.0, bins // 2 + 1)[1:]])


def ulam_matrix(m: MapSpec, bins: int, sub: int | None = None, edges=None):
    """Column-stochastic Ulam matrix, on a uniform grid unless ``edges`` is given.

    By default entries are exact: the fraction of bin i (Lebesgue) whose image
    lies in bin j, computed from branch preimages of the bin edges. With
    ``sub`` set, entries are instead estimated from ``sub`` equispaced
    subsamples per bin (uniform grid only).
    """
    if sub is not None:
        if edges is not None:
            raise ValueError("subsampled entries need the uniform grid")
        src = np.repeat(np.arange(bins), sub)
        x = (src + (np.tile(np.arange(sub), bins) + 0.5) / sub) / bins
        y = np.where(x < 0.5, x * (1.0 + (2.0 * x) ** m.gamma), 2.0 * x - 1.0)
        dst = np.clip((y * bins).astype(np.int64), 0, bins - 1)
        P = sparse.csc_matrix((np.full(src.size, 1.0 / sub), (dst, src)), shape=(bins, bins))
        P.sum_duplicates()
        return P
    if edges is None:
        if bins % 2:
            raise ValueError("exact Ulam matrix needs an even bin count so 1/2 is an edge")
        edges = np.linspace(0.0, 1.0, bins + 1)
    edges = np.asarray(edges, dtype=float)
    nb = edges.size - 1
    half = int(np.searchsorted(edges, 0.5))
    if edges[0] != 0.0 or edges[-1] != 1.0 or edges[half] != 0.5 or np.any(np.diff(edges) <= 0):
        raise ValueError("edges must increase from 0 to 1 and include 1/2")
    width = np.diff(edges)
    pre_left = _left_inverse(m.gamma, edges)
    pre_left[0], pre_left[-1] = 0.0, 0.5
    rows, cols, vals = [], [], []
    for pre, src in ((pre_left, np.arange(half)), (None, np.arange(half, nb))):
        a, b = edges[src], edges[src + 1]
        if src[0] == 0:
            ia, ib = left_branch(m.gamma, a), left_branch(m.gamma, b)
        else:
            ia, ib = 2.0 * a - 1.0, 2.0 * b - 1.0
        jlo = np.clip(np.searchsorted(edges, ia, side="right") - 1, 0, nb - 1)
        jhi = np.maximum(np.clip(np.searchsorted(edges, ib, side="left") - 1, 0, nb - 1), jlo)
        cnt = jhi - jlo + 1
        s_rep = np.repeat(src, cnt)
        j_rep = np.repeat(jlo, cnt) + (np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt))
        if src[0] == 0:
            lo = np.maximum(edges[s_rep], pre[j_rep])
            hi = np.minimum(edges[s_rep + 1], pre[j_rep + 1])
            overlap = np.clip(hi - lo, 0.0, None)
        else:
            # image coordinates: (1 + e) / 2 rounds tiny edges e onto 1/2
            lo = np.maximum(np.repeat(ia, cnt), edges[j_rep])
            hi = np.minimum(np.repeat(ib, cnt), edges[j_rep + 1])
            overlap = 0.5 * np.clip(hi - lo, 0.0, None)
        rows.append(j_rep)
        cols.append(s_rep)
        vals.append(overlap / width[s_rep])
    rows, cols, vals = map(np.concatenate, (rows, cols, vals))
    P = sparse.csc_matrix((vals, (rows, cols)), shape=(nb, nb))
    P.sum_duplicates()
    # renormalize columns against preimage round-off
    colsum = np.asarray(P.sum(axis=0)).ravel()
    return P @ sparse.diags(1.0 / colsum)


def ulam_density(m: MapSpec, bins: int = 1024, max_iter: int = 100000,
                 tol: float = 1e-10, sub: int | None = None,
                 grading: float | None = None) -> DensityEstimate:
    """Invariant bin masses of the Ulam matrix.

    The fixed vector is found by a sparse direct solve and then polished by
    power iteration until ``|P h - h|_1 <= tol``. With ``grading`` set the
    grid is :func:`graded_edges` (``bins`` then counts the far-field cells).
    """
    if bins < 16:
        raise ValueError("bins must be >= 16")
    edges = np.linspace(0.0, 1.0, bins + 1) if grading is None else graded_edges(bins, grading)
    P = ulam_matrix(m, bins, sub, None if grading is None else edges).tocsc()
    bins = edges.size - 1
    # solve for heights, not masses: graded masses span twenty decades and a
    # direct solve in mass units loses the small cells to absolute round-off
    w = np.diff(edges)
    Q = sparse.diags(1.0 / w) @ P @ sparse.diags(w)
    A = (Q - sparse.identity(bins, format="csc")).tolil()
    A[bins - 1, :] = w
    rhs = np.zeros(bins)
    rhs[-1] = 1.0
    h = np.clip(splinalg.spsolve(A.tocsc(), rhs), 0.0, None) * w
    h /= h.sum()
    it = 0
    res = np.abs(P @ h - h).sum()
    while res > tol:
        h = P @ h
        h /= h.sum()
        res = np.abs(P @ h - h).sum()
        it += 1
        if it > max_iter:
            raise ConvergenceError(f"Ulam power iteration stalled at residual {res:.2e}")
    h = h / math.fsum(h)
    return DensityEstimate(edges, h, "UlamMatrix", it, float(res))


DEFAULT_GRADING = 1.0 / 256


@lru_cache(maxsize=8)
def _default_density(gamma):
    return ulam_density(MapSpec.lsv(gamma), 4096, grading=DEFAULT_GRADING)


def default_density(m: MapSpec) -> DensityEstimate:
    """Cached graded Ulam density used as the invariant measure of an LSV map."""
    return _default_density(m.gamma)


def orbit_histogram_density(m: MapSpec, bins: int, seed, n: int) -> DensityEstimate:
    counts = np.zeros(bins)
    for chunk in iterate_orbit(m, seed, n):
        counts += np.bincount(np.clip((chunk * bins).astype(np.int64), 0, bins - 1),
                              minlength=bins)
    return DensityEstimate(np.linspace(0.0, 1.0, bins + 1), counts / counts.sum(),
                           "OrbitHistogram", n)


# ---------------------------------------------------------------- inducing

@dataclass
class InducedSystem:
    """First-return system on Y = [y_lo, 1] = [1/2, 1] together with rungs B_0..B_{M-1}."""
    map: MapSpec
    y_lo: float
    M: int
    rungs: list
    mu_Y: float
    mean_return: float
    mean_return_stderr: float
    provenance: dict = field(default_factory=dict)

    @property
    def base(self):
        return [(self.y_lo, 1.0)]

    @property
    def kac_return(self) -> float:
        return 1.0 / self.mu_Y

    @property
    def partition(self):
        parts = [{"tag": "A", "interval": [0.5, 1.0], "return_time": "evaluated pointwise"}]
        parts += [{"tag": "B", "index": j, "interval": [lo, hi]}
                  for j, (lo, hi) in enumerate(self.rungs)]
        return parts

    def contains(self, x):
        return (np.asarray(x) >= self.y_lo) & (np.asarray(x) <= 1.0)

    def to_json(self) -> str:
        return json.dumps({"map": self.map.to_dict(), "base": self.base, "M": self.M,
                           "partition": self.partition, "mu_Y": self.mu_Y,
                           "mean_return": self.mean_return,
                           "stderr": self.mean_return_stderr}, indent=2)


def ladder_depth(m: MapSpec, x0: float) -> int:
    """Smallest M with x0 in [1/2, 1] or one of the rungs B_0..B_{M-1}."""
    if not 0.0 < x0 <= 1.0:
        raise ValueError("x0 must lie in (0, 1]; the neutral fixed point 0 is excluded")
    M, edge = 0, 0.5
    while x0 < edge:
        edge = _invert_left(m.gamma, edge, 200)
        M += 1
        if M > 10000:
            raise ConvergenceError("x0 too close to 0 for the ladder")
    return M


def first_return_system(m: MapSpec, x0: float, density: DensityEstimate | None = None,
                        count: int = 100000, seed=0) -> InducedSystem:
    if x0 == 0.0:
        raise ValueError("x0 = 0 is the indifferent fixed point and cannot be induced on")
    M = ladder_depth(m, x0)
    rungs = ladder_partition(m, M - 1) if M > 0 else []
    y_lo = rungs[-1][0] if rungs else 0.5
    if m.dyadic:
        mu_Y = 1.0 - y_lo
    else:
        density = density if density is not None else default_density(m)
        mu_Y = density.mass_between(y_lo, 1.0)
    sys = InducedSystem(m, y_lo, M, rungs, mu_Y, float("nan"), float("nan"),
                        {"x0": x0, "seed": seed, "count": count})
    _, rts = return_time_sequence(sys, m, seed, count)
    sys.mean_return, sys.mean_return_stderr = batch_mean(rts.astype(float))
    return sys


def batch_mean(v, nb: int = 50):
    """Mean and batch-means standard error."""
    v = np.asarray(v, dtype=float)
    nb = min(nb, max(1, v.size // 2))
    blen = v.size // nb
    means = v[:nb * blen].reshape(nb, blen).mean(axis=1)
    se = means.std(ddof=1) / math.sqrt(nb) if nb > 1 else float("nan")
    return float(v.mean()), float(se)


def return_time_sequence(sys: InducedSystem, m: MapSpec, seed, count: int,
                         cap: int = 10**9, burn_in: int = DEFAULT_BURN_IN):
    """Successive return points to Y and their return times, starting inside Y."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pts = np.empty(count)
    rts = np.empty(count, dtype=np.int64)
    if not m.dyadic:
        x = (float(rng.integers(0, 1 << 53)) + 0.5) * 2.0 ** -53
        x = K.lsv_burn(x, m.gamma, burn_in)
        while x < sys.y_lo:
            x = K.lsv_step(x, m.gamma)
        _, flag = K.lsv_returns(x, m.gamma, sys.y_lo, count, cap, pts, rts)
        if flag:
            raise ExcursionCapError(f"an excursion exceeded {cap} steps")
        return pts, rts
    stream = OrbitStream(m, rng, burn_in)
    last = None
    t0 = 0
    k = 0
    buf = np.empty(DEFAULT_CHUNK, dtype=np.int64)
    while k < count:
        xs = stream.take(DEFAULT_CHUNK)
        h = K.hits(xs, sys.y_lo, 1.0, buf)
        idx = buf[:h] + t0
        for j, x in zip(idx, xs[idx - t0]):
            if last is not None:
                pts[k] = x
                rts[k] = j - last
                k += 1
                if k == count:
                    break
            last = j
        t0 += DEFAULT_CHUNK
        if last is not None and t0 - last > cap:
            raise ExcursionCapError(f"an excursion exceeded {cap} steps")
    return pts, rts
