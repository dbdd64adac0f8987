"""Frechet observables, their tails, scaling/centering constants and Karamata oracles.

An observable is a finite sum of power singularities ``a_i |x - x_i|^(-1/alpha)``
active on a support set, plus an optional piecewise-polynomial (Holder)
addend. Integrals against Lebesgue measure or against a piecewise-constant
density are computed exactly from antiderivatives, so the singularities never
meet a quadrature rule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy import optimize

from . import _kernels as K
from .dynamics import DensityEstimate, batch_mean

LEBESGUE = "lebesgue"


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float

    def __float__(self):
        return float(self.value)


# ---------------------------------------------------------------- intervals

def _norm_intervals(iv):
    if iv is None:
        return None
    out = sorted((float(a), float(b)) for a, b in iv)
    for a, b in out:
        if not 0.0 <= a < b <= 1.0:
            raise ValueError(f"bad interval [{a}, {b}]")
    return tuple(out)


def intersect_intervals(A, B):
    A = ((0.0, 1.0),) if A is None else A
    B = ((0.0, 1.0),) if B is None else B
    out = []
    for a0, a1 in A:
        for b0, b1 in B:
            lo, hi = max(a0, b0), min(a1, b1)
            if lo < hi:
                out.append((lo, hi))
    return tuple(sorted(out))


def _inside(x, iv):
    return iv is None or any(a <= x <= b for a, b in iv)


# ---------------------------------------------------------------- Holder addend

@dataclass(frozen=True)
class HolderPart:
    """Sum of polynomial pieces; piece k is ``sum_d c[d] x^d`` on ``[lo, hi)``."""
    pieces: tuple

    def __post_init__(self):
        object.__setattr__(self, "pieces", tuple(
            (float(lo), float(hi), tuple(float(c) for c in coefs))
            for lo, hi, coefs in self.pieces))
        for lo, hi, coefs in self.pieces:
            if not 0.0 <= lo < hi <= 1.0:
                raise ValueError(f"bad piece [{lo}, {hi})")
            if len(coefs) == 0:
                raise ValueError("empty polynomial")

    @classmethod
    def polynomial(cls, coefs, lo=0.0, hi=1.0):
        return cls(((lo, hi, tuple(coefs)),))

    @classmethod
    def constant(cls, c, lo=0.0, hi=1.0):
        return cls(((lo, hi, (c,)),))

    def __add__(self, other):
        return HolderPart(self.pieces + other.pieces)

    def scaled(self, lam):
        return HolderPart(tuple((lo, hi, tuple(lam * c for c in cs)) for lo, hi, cs in self.pieces))

    def clipped(self, iv):
        if iv is None:
            return self
        out = []
        for lo, hi, cs in self.pieces:
            for a, b in iv:
                u, v = max(lo, a), min(hi, b)
                if u < v:
                    out.append((u, v, cs))
        return HolderPart(tuple(out))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for lo, hi, cs in self.pieces:
            on = ((x >= lo) & (x < hi)) | ((x == 1.0) & (hi == 1.0))
            out = out + np.where(on, np.polynomial.polynomial.polyval(x, cs), 0.0)
        return out

    def integral(self, u, v):
        """Exact integral over [u, v]."""
        tot = 0.0
        for lo, hi, cs in self.pieces:
            a, b = max(lo, u), min(hi, v)
            if a < b:
                anti = np.polynomial.polynomial.polyint(cs)
                tot += (np.polynomial.polynomial.polyval(b, anti)
                        - np.polynomial.polynomial.polyval(a, anti))
        return float(tot)

    def breakpoints(self):
        return [p for lo, hi, _ in self.pieces for p in (lo, hi)]

    def to_dict(self):
        return [{"interval": [lo, hi], "coefs": list(cs)} for lo, hi, cs in self.pieces]


# ---------------------------------------------------------------- observable

@dataclass(frozen=True)
class FrechetObservable:
    """phi(x) = sum_i a_i |x - x_i|^(-1/alpha) + holder(x), masked by ``support``.

    ``terms`` holds ``(a_i, x_i)`` pairs sharing the single index ``alpha``.
    The support mask applies to the singular terms and, for observables
    built by users, to the Holder addend as well. Derived pieces (the
    inducing decomposition) set ``check=False``: their addend is already
    placed and their centers may lie outside the support.
    """
    terms: tuple
    alpha: float | None
    support: tuple | None = None
    holder: HolderPart | None = None
    check: bool = field(default=True, compare=False, repr=False)

    def __post_init__(self):
        terms = tuple((float(a), float(c)) for a, c in self.terms)
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "support", _norm_intervals(self.support))
        if terms:
            if self.alpha is None or not 0.0 < self.alpha <= 2.0:
                raise ValueError(f"alpha must lie in (0, 2], got {self.alpha}")
        for a, c in terms:
            if not 0.0 <= c <= 1.0:
                raise ValueError(f"center {c} outside [0, 1]")
        if self.check:
            if not any(a != 0 for a, _ in terms) and self.holder is None:
                raise ValueError("observable needs a nonzero coefficient or a Holder addend")
            for a, c in terms:
                if a != 0 and not _inside(c, self.support):
                    raise ValueError(f"center {c} lies outside the support mask")
            if self.holder is not None and self.support is not None:
                object.__setattr__(self, "holder", self.holder.clipped(self.support))
            object.__setattr__(self, "check", False)

    # constructors
    @classmethod
    def single(cls, x0, alpha, a=1.0, support=None, holder=None):
        return cls(((a, x0),), alpha, support, holder)

    @classmethod
    def holder_only(cls, holder: HolderPart, support=None):
        return cls((), None, support, holder)

    # derived observables
    def restricted(self, iv):
        """phi times the indicator of the interval union ``iv``."""
        iv = _norm_intervals(iv)
        h = self.holder.clipped(iv) if self.holder is not None else None
        return FrechetObservable(self.terms, self.alpha, intersect_intervals(self.support, iv),
                                 h, check=False)

    def plus_holder(self, extra: HolderPart):
        h = extra if self.holder is None else self.holder + extra
        return FrechetObservable(self.terms, self.alpha, self.support, h, check=False)

    def scaled(self, lam):
        h = self.holder.scaled(lam) if self.holder is not None else None
        return FrechetObservable(tuple((lam * a, c) for a, c in self.terms), self.alpha,
                                 self.support, h, check=False)

    def negated(self):
        return self.scaled(-1.0)

    # properties
    @property
    def is_single(self):
        return len(self.terms) == 1 and self.holder is None

    @property
    def centers(self):
        return [c for a, c in self.terms if a != 0]

    @property
    def bounded(self):
        return not any(a != 0 for a, _ in self.terms)

    @cached_property
    def kernel(self):
        coefs = np.array([a for a, _ in self.terms], dtype=float)
        centers = np.array([c for _, c in self.terms], dtype=float)
        expo = 1.0 / self.alpha if self.terms else 0.0
        tsupp = (np.array(self.support, dtype=float).reshape(-1, 2) if self.support is not None
                 else np.zeros((0, 2)))
        pieces = self.holder.pieces if self.holder is not None else ()
        deg = max((len(cs) for _, _, cs in pieces), default=1)
        plo = np.array([p[0] for p in pieces], dtype=float)
        phi = np.array([p[1] for p in pieces], dtype=float)
        pcoef = np.zeros((len(pieces), deg))
        for k, (_, _, cs) in enumerate(pieces):
            pcoef[k, :len(cs)] = cs
        return coefs, centers, expo, tsupp, plo, phi, pcoef

    def __call__(self, x):
        return phi_eval(self, x)

    def value_at_zero(self) -> float:
        return float(phi_eval(self, 0.0))

    def to_dict(self):
        d = {"alpha": self.alpha, "terms": [{"a": a, "x0": c} for a, c in self.terms]}
        if self.support is not None:
            d["support"] = [list(iv) for iv in self.support]
        if self.holder is not None:
            d["holder"] = self.holder.to_dict()
        return d


def phi_eval(obs: FrechetObservable, x):
    """phi(x); exact centers give a signed infinity."""
    xa = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any((xa < 0) | (xa > 1)):
        raise ValueError("phi_eval needs x in [0, 1]")
    out = np.empty_like(xa)
    K.eval_array(xa, *obs.kernel, out)
    return out.reshape(np.shape(x)) if np.ndim(x) else float(out[0])


def eval_into(obs: FrechetObservable, xs, out):
    """Fast path for orbit chunks (no validation)."""
    K.eval_array(xs, *obs.kernel, out)
    return out


# ---------------------------------------------------------------- exact integrals

def _term_antideriv(x, c, s):
    d = x - c
    if s == 1.0:
        return np.sign(d) * np.log(np.abs(d))
    return np.sign(d) * np.abs(d) ** (1.0 - s) / (1.0 - s)


def _breakpoints(obs, extra=()):
    pts = {0.0, 1.0}
    pts.update(obs.centers)
    if obs.support is not None:
        pts.update(p for iv in obs.support for p in iv)
    if obs.holder is not None:
        pts.update(obs.holder.breakpoints())
    pts.update(float(p) for p in extra)
    return np.array(sorted(p for p in pts if 0.0 <= p <= 1.0))


def segment_integrals(obs: FrechetObservable, pts):
    """Exact integral of phi over each segment [pts[k], pts[k+1]].

    ``pts`` must contain every center, support edge and Holder breakpoint.
    """
    pts = np.asarray(pts, dtype=float)
    u, v = pts[:-1], pts[1:]
    mid = 0.5 * (u + v)
    out = np.zeros(u.size)
    if obs.terms:
        s = 1.0 / obs.alpha
        active = np.ones(u.size, dtype=bool) if obs.support is None else np.zeros(u.size, dtype=bool)
        if obs.support is not None:
            for a, b in obs.support:
                active |= (mid >= a) & (mid <= b)
        for a, c in obs.terms:
            if a == 0:
                continue
            touches = (u == c) | (v == c)
            with np.errstate(divide="ignore", invalid="ignore"):
                val = a * (_term_antideriv(v, c, s) - _term_antideriv(u, c, s))
            if s >= 1.0:
                val = np.where(touches, math.copysign(np.inf, a), val)
            out += np.where(active, val, 0.0)
    if obs.holder is not None:
        for lo, hi, cs in obs.holder.pieces:
            anti = np.polynomial.polynomial.polyint(cs)
            a_, b_ = np.clip(u, lo, hi), np.clip(v, lo, hi)
            out += (np.polynomial.polynomial.polyval(b_, anti)
                    - np.polynomial.polynomial.polyval(a_, anti))
    return out


def _density_weights(measure, pts):
    """Density height on each segment (1 for Lebesgue)."""
    if measure == LEBESGUE:
        return np.ones(len(pts) - 1)
    if isinstance(measure, DensityEstimate):
        return measure.density(0.5 * (pts[:-1] + pts[1:]))
    raise TypeError(f"unsupported measure {measure!r}")


def _grid_points(measure):
    if isinstance(measure, DensityEstimate):
        return measure.bin_edges
    return ()


def integrate_over(obs, measure, intervals):
    """Integral of phi against the measure over a union of intervals."""
    extra = [p for iv in intervals for p in iv]
    pts = _breakpoints(obs, list(_grid_points(measure)) + extra)
    seg = segment_integrals(obs, pts)
    w = _density_weights(measure, pts)
    mid = 0.5 * (pts[:-1] + pts[1:])
    sel = np.zeros(mid.size, dtype=bool)
    for a, b in intervals:
        sel |= (mid >= a) & (mid <= b)
    return float(math.fsum(seg[sel] * w[sel]))


def measure_of(measure, intervals) -> float:
    if measure == LEBESGUE:
        return float(sum(b - a for a, b in intervals))
    return float(sum(measure.mass_between(a, b) for a, b in intervals))


# ---------------------------------------------------------------- empirical measure

@dataclass
class EmpiricalMeasure:
    """Observable values along an orbit, used as a sampled invariant measure."""
    values: np.ndarray

    @classmethod
    def from_orbit(cls, m, obs, seed, n, burn_in=4096):
        from .dynamics import iterate_orbit
        vals = []
        for chunk in iterate_orbit(m, seed, n, burn_in):
            vals.append(eval_into(obs, chunk, np.empty_like(chunk)))
        return cls(np.concatenate(vals))


# ---------------------------------------------------------------- expectations

def expectation(obs: FrechetObservable, measure=LEBESGUE):
    """E[phi]; exact for Lebesgue and piecewise-constant densities."""
    if isinstance(measure, EmpiricalMeasure):
        return Estimate(*batch_mean(measure.values))
    if obs.terms and obs.alpha <= 1.0 and not obs.bounded:
        return math.inf if all(a > 0 for a, _ in obs.terms if a != 0) else math.nan
    pts = _breakpoints(obs, _grid_points(measure))
    return float(math.fsum(segment_integrals(obs, pts) * _density_weights(measure, pts)))


def exceedance_set(obs: FrechetObservable, t: float):
    """Union of intervals where |phi| > t, located by bracketing and root refinement."""
    grid = set(np.linspace(0.0, 1.0, 2049).tolist())
    grid.update(_breakpoints(obs).tolist())
    offs = 10.0 ** (-np.arange(0, 65) / 4.0)
    for c in obs.centers:
        grid.update((c - offs)[c - offs > 0].tolist())
        grid.update((c + offs)[c + offs < 1].tolist())
    xs = np.array(sorted(grid))
    g = np.abs(phi_eval(obs, xs)) - t
    above = g > 0
    out = []
    start = 0.0 if above[0] else None

    def f(x):
        return abs(phi_eval(obs, x)) - t

    for k in range(xs.size - 1):
        if above[k] != above[k + 1]:
            r = optimize.brentq(f, xs[k], xs[k + 1], xtol=1e-16, rtol=1e-15)
            if above[k]:
                out.append((start, r))
                start = None
            else:
                start = r
    if start is not None:
        out.append((start, 1.0))
    return out


def _closed_form_tail(obs, t):
    """Exact Lebesgue measure of {|phi| > t} for a single bare term."""
    (a, c), = obs.terms
    r = (abs(a) / t) ** obs.alpha
    if obs.support is None:
        return min(r, c) + min(r, 1.0 - c)  # avoids cancellation in (c + r) - (c - r)
    return measure_of(LEBESGUE, intersect_intervals(obs.support, ((max(0.0, c - r), min(1.0, c + r)),)))


def tail_prob(obs: FrechetObservable, measure, t: float):
    """mu(|phi| > t). Empirical measures return an :class:`Estimate`."""
    if not t > 0:
        raise ValueError("t must be positive")
    if isinstance(measure, EmpiricalMeasure):
        return Estimate(*batch_mean((np.abs(measure.values) > t).astype(float)))
    if measure == LEBESGUE and obs.is_single:
        return min(1.0, _closed_form_tail(obs, t))
    return min(1.0, measure_of(measure, exceedance_set(obs, t)))


def truncated_expectation(obs, measure, t: float) -> float:
    """E[phi 1_{|phi| < t}]."""
    if measure == LEBESGUE and obs.is_single and obs.support is None and obs.alpha != 1.0:
        # closed form in distances to the center; endpoints c +- r lose r below one ulp of c
        (a, c), = obs.terms
        r = (abs(a) / t) ** obs.alpha
        e = 1.0 - 1.0 / obs.alpha
        return a * sum((d ** e - min(r, d) ** e) / e for d in (c, 1.0 - c) if d > 0)
    if measure == LEBESGUE and obs.is_single and obs.alpha > 1.0:
        (a, c), = obs.terms
        r = (abs(a) / t) ** obs.alpha
        return expectation(obs, LEBESGUE) - integrate_over(obs, LEBESGUE, [(max(0.0, c - r), min(1.0, c + r))])
    big = exceedance_set(obs, t)
    inner = [(a, b) for a, b in _complement(big)]
    return integrate_over(obs, measure, inner)


def _complement(iv):
    out, prev = [], 0.0
    for a, b in iv:
        if a > prev:
            out.append((prev, a))
        prev = b
    if prev < 1.0:
        out.append((prev, 1.0))
    return out


# ---------------------------------------------------------------- tails and scaling

@dataclass(frozen=True)
class TailProfile:
    p: float
    tail_constant: float
    source: str = "ClosedFormLebesgue"

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")

    @property
    def q(self):
        return 1.0 - self.p

    @property
    def beta(self):
        return 2.0 * self.p - 1.0


def tail_profile(obs: FrechetObservable, measure=LEBESGUE) -> TailProfile:
    """Limit of t^alpha mu(|phi| > t) and the right-tail share p.

    Each center contributes ``|a|^alpha`` times the density at the center,
    once per side on which it is approached inside the support.
    """
    if obs.bounded:
        raise ValueError("bounded observable has no Frechet tail")
    pos = neg = 0.0
    for a, c in obs.terms:
        if a == 0:
            continue
        sides = 0
        for sgn in (-1.0, 1.0):
            y = c + sgn * 1e-12
            if 0.0 <= y <= 1.0 and _inside(y, obs.support):
                sides += 1
        h = 1.0 if measure == LEBESGUE else measure.value_at_point(c)
        w = sides * abs(a) ** obs.alpha * h
        if a > 0:
            pos += w
        else:
            neg += w
    src = "ClosedFormLebesgue" if measure == LEBESGUE else "UlamDensity"
    return TailProfile(pos / (pos + neg), pos + neg, src)


def empirical_tail_profile(values, alpha, quantile=0.999) -> TailProfile:
    v = np.asarray(values, dtype=float)
    t = np.quantile(np.abs(v), quantile)
    big = np.abs(v) > t
    return TailProfile(float((v[big] > 0).mean()), float(big.mean() * t ** alpha), "EmpiricalOrbit")


def scaling_bn(obs: FrechetObservable, measure, n: int) -> float:
    """b solving n mu(|phi| > b) = 1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if isinstance(measure, EmpiricalMeasure):
        v = np.abs(measure.values)
        if v.size < 10 * n:
            raise ValueError("empirical b_n needs an orbit much longer than n")
        return float(np.quantile(v, 1.0 - 1.0 / n))
    if measure == LEBESGUE and obs.is_single:
        (a, c), = obs.terms
        prof = tail_profile(obs)
        k = prof.tail_constant / abs(a) ** obs.alpha
        b = abs(a) * (k * n) ** (1.0 / obs.alpha)
        if abs(n * _closed_form_tail(obs, b) - 1.0) < 1e-9:
            return b

    def g(logb):
        return math.log(n * max(tail_prob(obs, measure, math.exp(logb)), 1e-300))

    lo, hi = 0.0, 1.0
    while g(lo) < 0:
        lo -= 2.0
        if lo < -700:
            raise ValueError("cannot bracket b_n: tail never reaches 1/n")
    while g(hi) > 0:
        hi += 2.0
        if hi > 700:
            raise ValueError("cannot bracket b_n")
    lb = optimize.brentq(g, lo, hi, xtol=1e-12)
    b = math.exp(lb)
    if not tail_prob(obs, measure, 0.99 * b) > tail_prob(obs, measure, 1.01 * b):
        raise ValueError("degenerate observable: tail is flat near b_n")
    return b


def centering_cn(obs: FrechetObservable, measure, n: int, alpha: float | None = None) -> float:
    """0 for alpha < 1, n E[phi] for alpha in (1, 2)."""
    alpha = obs.alpha if alpha is None else alpha
    if alpha == 1.0:
        raise ValueError("alpha = 1 centering is not defined here")
    if alpha < 1.0:
        return 0.0
    e = expectation(obs, measure)
    return n * float(e)


@dataclass(frozen=True)
class ScalingScheme:
    alpha: float
    b: Callable[[int], float]
    c: Callable[[int], float]
    tail: TailProfile


def scaling_scheme(obs: FrechetObservable, measure=LEBESGUE) -> ScalingScheme:
    mean = None if obs.alpha < 1.0 else expectation(obs, measure)
    prof = tail_profile(obs, measure if isinstance(measure, DensityEstimate) else LEBESGUE)
    return ScalingScheme(obs.alpha, lambda n: scaling_bn(obs, measure, n),
                         lambda n: 0.0 if mean is None else n * mean, prof)


# ---------------------------------------------------------------- Karamata oracles

def karamata_truncated_moment(alpha, k, u, tail: TailProfile) -> float:
    """Asymptotic E[|phi|^k 1_{|phi| <= u}] ~ alpha/(k - alpha) u^k mu(|phi| > u)."""
    if not k > alpha:
        raise ValueError("need k > alpha")
    mu = min(1.0, tail.tail_constant * u ** (-alpha))
    return alpha / (k - alpha) * u ** k * mu


def c_alpha_eps(alpha, beta, eps) -> float:
    """Centering correction: 0 (alpha<1), -beta log eps (alpha=1), eps^(1-alpha) beta alpha/(alpha-1)."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    if alpha < 1.0:
        return 0.0
    if alpha == 1.0:
        return -beta * math.log(eps)
    return eps ** (1.0 - alpha) * beta * alpha / (alpha - 1.0)


def centering_shift(alpha, p) -> float:
    """Offset (p - q) alpha/(alpha - 1) between truncation- and mean-centered limits."""
    if not 1.0 < alpha < 2.0:
        raise ValueError("the shift is defined for alpha in (1, 2)")
    return (2.0 * p - 1.0) * alpha / (alpha - 1.0)
