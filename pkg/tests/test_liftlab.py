import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from stablelift import birkhoff as B
from stablelift import dynamics as D
from stablelift import liftlab as L
from stablelift import observables as O


@pytest.fixture(scope="module")
def lsv23():
    m = D.MapSpec.lsv(2 / 3)
    measure = B.default_measure(m)
    return m, measure, D.first_return_system(m, 0.75, measure, 20000, 0)


@pytest.fixture(scope="module")
def lsv075_sys():
    m = D.MapSpec.lsv(0.75)
    measure = B.default_measure(m)
    return m, measure, D.first_return_system(m, 0.75, measure, 20000, 0)


@pytest.fixture(scope="module")
def doubling_sys():
    return L.base_system(D.MapSpec.doubling())


def _psi_mean_by_quadrature(dec, measure):
    """E[psi] against the piecewise-constant density, integrated bin by bin with quad."""
    e = measure.bin_edges
    h = measure.heights
    total = 0.0
    for i in range(e.size - 1):
        total += h[i] * integrate.quad(lambda x: float(dec.psi(x)), e[i], e[i + 1])[0]
    return total


# ---------------------------------------------------------------- decomposition

def test_split_supported_in_base(lsv23):
    m, measure, sys = lsv23
    obs = O.FrechetObservable.single(0.8, 1.6, support=[(0.5, 1.0)])
    dec = L.decompose(obs, sys, measure)
    assert dec.E_phi1 == 0.0 and dec.phi_at_0 == 0.0
    assert dec.g_values == (0.0, 0.0)
    x = np.random.default_rng(0).random(1000)
    assert np.all(dec.psi(x) == 0.0)


def test_split_of_constant_one(lsv23):
    m, measure, sys = lsv23
    one = O.FrechetObservable.holder_only(O.HolderPart.constant(1.0))
    dec = L.decompose(one, sys, measure)
    mu_Y = measure.mass_between(0.5, 1.0)
    assert dec.mu_Y == pytest.approx(mu_Y, rel=1e-12)
    assert dec.E_phi1 == pytest.approx(1 - mu_Y, rel=1e-10)
    A = 1 - dec.E_phi1
    off, on = dec.g_values
    assert off == pytest.approx(A) and on == pytest.approx(A * (1 - 1 / mu_Y))
    assert O.phi_eval(dec.phi2, np.array([0.2, 0.7])).tolist() == [0.0, 1.0]


def test_expectations_add_up(lsv075_sys):
    m, measure, sys = lsv075_sys
    obs = O.FrechetObservable.single(0.75, 1.5, holder=O.HolderPart.polynomial([2.0, -1.0]))
    dec = L.decompose(obs, sys, measure)
    assert dec.E_phi1 + dec.E_phi2 == pytest.approx(O.expectation(obs, measure), rel=1e-9)
    assert dec.R_bar == pytest.approx(sys.kac_return)
    assert json.loads(json.dumps(dec.to_dict()))["y_lo"] == sys.y_lo


def test_center_outside_base_rejected(lsv23):
    m, measure, sys = lsv23
    with pytest.raises(L.DecompositionError):
        L.decompose(O.FrechetObservable.single(0.3, 1.6), sys, measure)


@given(st.floats(0.5, 0.99), st.floats(1.05, 1.95), st.floats(-3, 3), st.floats(-3, 3))
def test_decomposition_invariants(lsv23, x0, alpha, c0, c1):
    m, measure, sys = lsv23
    obs = O.FrechetObservable.single(x0, alpha, holder=O.HolderPart.polynomial([c0, c1]))
    dec = L.decompose(obs, sys, measure)
    off, on = dec.g_values
    assert off * (1 - dec.mu_Y) + on * dec.mu_Y == pytest.approx(0.0, abs=1e-9)
    assert float(dec.psi(0.0)) == pytest.approx(0.0, abs=1e-9)
    x = np.random.default_rng(1).random(200)
    v = O.phi_eval(obs, x)
    p1, p2, _, _ = dec.pieces(x, v)
    np.testing.assert_array_equal(p1 + p2, v)


def test_psi_has_zero_mean(lsv075_sys):
    m, _, sys = lsv075_sys
    coarse = D.ulam_density(m, 256)
    sys_c = D.first_return_system(m, 0.75, coarse, 5000, 0)
    obs = O.FrechetObservable.single(0.75, 1.5, holder=O.HolderPart.polynomial([1.0, -3.0, 1.0]))
    dec = L.decompose(obs, sys_c, coarse)
    assert _psi_mean_by_quadrature(dec, coarse) == pytest.approx(0.0, abs=1e-8)


# ---------------------------------------------------------------- identity and induced sums

def test_representation_identity(lsv075_sys):
    m, measure, sys = lsv075_sys
    obs = O.FrechetObservable.single(0.8, 1.5, holder=O.HolderPart.polynomial([1.0, 2.0]))
    dec = L.decompose(obs, sys, measure)
    rng = np.random.default_rng(3)
    for i in range(20):
        chk = L.representation_identity(dec, int(rng.integers(1, 3000)), seed=i)
        assert chk.rel_error <= 1e-8
        assert chk.N == math.floor(dec.R_bar * chk.n)
    assert set(chk.terms) == {"induced", "psi", "return_time", "V", "W"}
    with pytest.raises(ValueError):
        L.representation_identity(dec, 0)


def test_constant_observable_discrepancies_cancel(lsv075_sys):
    # for phi = c: g = c mu(Y) - c 1_Y and phi_2 - E[phi_2] = c 1_Y - c mu(Y), so V_n = -W_n
    m, measure, sys = lsv075_sys
    dec = L.decompose(O.FrechetObservable.holder_only(O.HolderPart.constant(2.5)), sys, measure)
    for i in range(5):
        chk = L.representation_identity(dec, 500 + 100 * i, seed=i)
        assert chk.terms["V"] == pytest.approx(-chk.terms["W"], abs=1e-9)


def test_induced_ensemble_index(doubling_sys):
    dec = L.decompose(O.FrechetObservable.single(0.75, 0.7), doubling_sys, O.LEBESGUE)
    ens = L.induced_sum_ensemble(dec, doubling_sys, 10 ** 4, 2000, seed=1)
    assert ens.values.size == 2000
    assert ens.stats["b_n"] == pytest.approx((10 ** 4 * 2.0) ** (1 / 0.7))
    assert ens.fit().params.alpha == pytest.approx(0.7, abs=0.07)


def test_induced_ensemble_rejects_bounded(doubling_sys):
    dec = L.decompose(O.FrechetObservable.holder_only(O.HolderPart.constant(1.0)), doubling_sys,
                      O.LEBESGUE)
    with pytest.raises(ValueError):
        L.induced_sum_ensemble(dec, doubling_sys, 10, 100)


def test_induced_mean_and_tails(lsv075_sys):
    m, measure, sys = lsv075_sys
    obs = O.FrechetObservable.single(0.8, 1.5)
    dec = L.decompose(obs, sys, measure)
    cal = L.induced_calibration(dec, sys, count=200000, seed=2, t_list=(20.0, 50.0, 100.0))
    assert abs(cal["mean"] - cal["predicted_mean"]) <= 4 * cal["stderr"]
    for row in cal["tails"]:
        assert abs(row["empirical"] - row["predicted"]) <= 4 * row["stderr"]


# ---------------------------------------------------------------- return times

def test_return_time_clt_regime():
    r = L.return_time_stable_check(0.4, 10 ** 4, 1000, seed=2)
    assert r.predicted_index == 2.0
    assert r.fitted_index == pytest.approx(2.0, abs=0.1)


def test_return_time_rejects_gamma():
    with pytest.raises(ValueError):
        L.return_time_stable_check(1.0, 10, 10)


def test_return_tail_slope():
    s = L.return_tail_slope(0.75, count=10 ** 6, seed=1)
    assert s["slope"] == pytest.approx(-1 / 0.75, rel=0.1)
    assert s["k_range"][0] >= 20


# ---------------------------------------------------------------- gates and trends

def test_dgm_gate_examples():
    g = L.dgm_gate(2 / 3, 1.6)
    assert g["admissible"] and g["p"] == pytest.approx(1.6 * 2 / 3) and g["dgm_conditions"]
    g = L.dgm_gate(2 / 3, 1.8)
    assert not g["admissible"] and g["binding"] == "upper"
    for a in (0.5, 1.2, 1.99):
        g = L.dgm_gate(0.4, a)
        assert not g["admissible"] and "empty" in g["reasons"][0]


@given(st.floats(0.51, 0.99), st.floats(0.01, 1.99))
def test_dgm_gate_matches_regime_window(gamma, alpha):
    lo, hi = B.case_iii_window(gamma)
    assert L.dgm_gate(gamma, alpha)["admissible"] == (lo < alpha < hi and lo < 2)


def test_lil_window_decreases(lsv23):
    m, measure, sys = lsv23
    obs = B.regime_observable(2 / 3, 1.6, 0.75, "iii", measure)
    dec = L.decompose(obs, sys, measure)
    r = L.lil_window_check(2 / 3, 1.6, dec, [10 ** 5, 10 ** 7], seed=1)
    assert r["rows"][1]["statistic"] < r["rows"][0]["statistic"]
    assert r["decreasing"] and not r["anomaly"]
    flagged = L.lil_window_check(2 / 3, 1.9, dec, [10 ** 4, 10 ** 5], seed=1, orbits=20)
    assert not flagged["gate"]["admissible"] and not flagged["anomaly"]


def test_lil_unit_windows(doubling_sys):
    dec = L.decompose(O.FrechetObservable.single(0.75, 1.5), doubling_sys, O.LEBESGUE)
    r = L.lil_window_check(0.0, 1.5, dec, [10 ** 2, 10 ** 4, 10 ** 6], seed=2)
    assert all(row["window"] == 1 for row in r["rows"]) and r["decreasing"]


def test_discrepancy_trend(lsv23):
    m, measure, sys = lsv23
    dec = L.decompose(B.regime_observable(2 / 3, 1.6, 0.75, "iii", measure), sys, measure)
    res = [L.discrepancy_check(dec, sys, 2 / 3, n, 200, seed=3) for n in (10 ** 3, 10 ** 4, 10 ** 5)]
    pw = [r["P_W"][0.5] for r in res]
    assert pw[0] > pw[1] > pw[2]
    # the return-time fluctuation itself stays nondegenerate
    iqr = [r["iqr_R"] for r in res]
    assert min(iqr) > 1.0 and max(iqr) / min(iqr) < 2.0


def test_psi_negligible(lsv075_sys):
    m, measure, sys = lsv075_sys
    dec = L.decompose(B.regime_observable(0.75, 1.6, 0.75, "ii", measure), sys, measure)
    r = L.psi_negligibility(dec, 0.75, [10 ** 3, 10 ** 4, 10 ** 5], 100, seed=1)
    assert r["kappa"] == 0.75
    iqr = [row["iqr"] for row in r["rows"]]
    assert iqr[0] > iqr[1] > iqr[2]


def test_end_to_end_case_i():
    v = L.end_to_end_lift(0.4, 1.5, 0.7, "i", n=10 ** 5, samples=2000, seed=1, tol_alpha=0.1)
    assert 1.4 <= v.direct_fit["alpha"] <= 1.6 and 1.4 <= v.induced_fit["alpha"] <= 1.6
    assert v.ks_between <= 0.05 and v.passed
    assert json.loads(v.to_json())["variant"] == "i"
