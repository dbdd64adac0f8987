"""Compiled inner loops. Everything here works on plain arrays."""
import numpy as np
from numba import njit

_INV53 = 1.0 / 9007199254740992.0  # 2^-53
# 1 is a fixed point of the right branch; a non-dyadic nudge keeps float
# orbits from being trapped there (a probability-zero event in exact arithmetic)
_NEAR_ONE = 1.0 - 1.2345e-12


@njit(cache=True)
def dyadic_chunk(words, start, m, out):
    """x_j = 53-bit window of the bit stream starting at bit ``start + j``.

    ``words`` must cover bit ``start + m + 63``. This is the exact
    doubling-map orbit of the point whose binary expansion is the stream.
    """
    for j in range(m):
        b = start + j
        q = b >> 6
        r = np.uint64(b & 63)
        if r == 0:
            w = words[q]
        else:
            w = (words[q] << r) | (words[q + 1] >> (np.uint64(64) - r))
        out[j] = float(w >> np.uint64(11)) * _INV53


@njit(cache=True, error_model="numpy")
def lsv_step(x, gamma):
    if x < 0.5:
        x = x * (1.0 + (2.0 * x) ** gamma)
    elif x == 0.5:
        x = 1.0
    else:
        x = 2.0 * x - 1.0
    if x >= 1.0:
        x = _NEAR_ONE
    return x


@njit(cache=True, error_model="numpy")
def lsv_chunk(x, gamma, m, out):
    for j in range(m):
        out[j] = x
        x = lsv_step(x, gamma)
    return x


@njit(cache=True, error_model="numpy")
def lsv_burn(x, gamma, k):
    for _ in range(k):
        x = lsv_step(x, gamma)
    return x


@njit(cache=True, error_model="numpy")
def _in_intervals(x, iv):
    if iv.shape[0] == 0:
        return True
    for k in range(iv.shape[0]):
        if iv[k, 0] <= x <= iv[k, 1]:
            return True
    return False


@njit(cache=True, error_model="numpy")
def eval_point(x, coefs, centers, expo, tsupp, plo, phi, pcoef):
    """Single evaluation of a compiled observable.

    Terms ``coefs[i] |x - centers[i]|^-expo`` are active on ``tsupp``
    (closed intervals, empty means everywhere); polynomial pieces act on
    half-open ``[plo, phi)`` with the right end closed when it equals 1.
    """
    v = 0.0
    if coefs.shape[0] > 0 and _in_intervals(x, tsupp):
        for i in range(coefs.shape[0]):
            d = abs(x - centers[i])
            if d == 0.0:
                v += np.inf if coefs[i] > 0 else -np.inf
            else:
                v += coefs[i] * d ** (-expo)
    for k in range(plo.shape[0]):
        if plo[k] <= x < phi[k] or (x == 1.0 and phi[k] == 1.0):
            acc = 0.0
            for d in range(pcoef.shape[1] - 1, -1, -1):
                acc = acc * x + pcoef[k, d]
            v += acc
    return v


@njit(cache=True, error_model="numpy")
def eval_array(xs, coefs, centers, expo, tsupp, plo, phi, pcoef, out):
    for j in range(xs.shape[0]):
        out[j] = eval_point(xs[j], coefs, centers, expo, tsupp, plo, phi, pcoef)


@njit(cache=True, error_model="numpy")
def fold_sums(vals, level):
    """(sum, sum of values with |v| < level, count of non-finite values)."""
    s = 0.0
    st = 0.0
    bad = 0
    for j in range(vals.shape[0]):
        v = vals[j]
        if not np.isfinite(v):
            bad += 1
        s += v
        if abs(v) < level:
            st += v
    return s, st, bad


@njit(cache=True)
def hits(xs, lo, hi, out):
    """Indices j with lo <= xs[j] <= hi; returns how many were written."""
    k = 0
    for j in range(xs.shape[0]):
        if lo <= xs[j] <= hi:
            out[k] = j
            k += 1
    return k


@njit(cache=True, error_model="numpy")
def lsv_returns(x, gamma, lo, count, cap, pts, rts):
    """Successive first returns to ``[lo, 1]`` starting from ``x`` in it.

    Returns the final point and a flag that is 1 if an excursion hit ``cap``.
    """
    for k in range(count):
        r = 0
        while True:
            x = lsv_step(x, gamma)
            r += 1
            if x >= lo:
                break
            if r >= cap:
                return x, 1
        pts[k] = x
        rts[k] = r
    return x, 0


@njit(cache=True, fastmath=True)
def lagged_products(y, jmax, nb):
    """Batch means of y_i * y_{i+j}, shape (jmax + 1, nb), over a shared range of i."""
    n = y.shape[0] - jmax
    blen = n // nb
    out = np.zeros((jmax + 1, nb))
    step = 1 << 14  # keep a tile of y in cache across lags
    for b in range(nb):
        s0 = b * blen
        for t in range(s0, s0 + blen, step):
            e = min(t + step, s0 + blen)
            for j in range(jmax + 1):
                acc = 0.0
                for i in range(t, e):
                    acc += y[i] * y[i + j]
                out[j, b] += acc
        for j in range(jmax + 1):
            out[j, b] /= blen
    return out
