import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stablelift import birkhoff as B
from stablelift import dynamics as D
from stablelift import observables as O
from stablelift.birkhoff import EnsembleConfig

from conftest import X0_IRRATIONAL


# ---------------------------------------------------------------- birkhoff_sum

def test_sum_of_constant(doubling):
    one = O.FrechetObservable.holder_only(O.HolderPart.constant(1.0))
    assert B.birkhoff_sum(doubling, one, 0.123, 10) == 10.0


def test_sum_of_indicator_hand_orbit(doubling):
    # orbit 0.3, 0.6: only the first point lies in [0, 1/2)
    ind = O.FrechetObservable.holder_only(O.HolderPart(((0.0, 0.5, (1.0,)),)))
    assert B.birkhoff_sum(doubling, ind, 0.3, 2) == 1.0


def test_sum_rejects_empty(doubling, frechet15):
    with pytest.raises(ValueError):
        B.birkhoff_sum(doubling, frechet15, 0.3, 0)


def test_ergodic_average():
    # a double is a dyadic rational, so its exact doubling orbit dies at 0; use an LSV map
    m = D.MapSpec.lsv(0.3)
    obs = O.FrechetObservable.single(0.6180339887, 1.9)
    n, x = 10 ** 6, 0.2718281828
    total = B.birkhoff_sum(m, obs, x, n)
    v = O.phi_eval(obs, D.orbit(m, 0, n, burn_in=0, start=x))
    assert total == pytest.approx(v.sum(), rel=1e-12)
    _, se = D.batch_mean(v)
    assert abs(total / n - O.expectation(obs, B.default_measure(m))) <= 3 * se


def test_exact_dyadic_orbit_reaches_zero(doubling):
    one = O.FrechetObservable.holder_only(O.HolderPart.polynomial([0.0, 1.0]))
    assert B.birkhoff_sum(doubling, one, 0.3, 60) == B.birkhoff_sum(doubling, one, 0.3, 2000)


# ---------------------------------------------------------------- ensembles

def test_config_validation(doubling, frechet15):
    with pytest.raises(ValueError):
        EnsembleConfig(doubling, frechet15, 100, 99)
    with pytest.raises(ValueError):
        EnsembleConfig(doubling, frechet15, 0, 100)


def test_worker_count_does_not_change_values(doubling, frechet15):
    a = B.scaled_ensemble(EnsembleConfig(doubling, frechet15, 2000, 240, master_seed=5, workers=1))
    b = B.scaled_ensemble(EnsembleConfig(doubling, frechet15, 2000, 240, master_seed=5, workers=3))
    assert np.array_equal(a.raw, b.raw)
    assert a.values.size == 240


def test_seed_changes_values(doubling, frechet15):
    a = B.scaled_ensemble(EnsembleConfig(doubling, frechet15, 500, 100, master_seed=1))
    b = B.scaled_ensemble(EnsembleConfig(doubling, frechet15, 500, 100, master_seed=2))
    assert not np.array_equal(a.raw, b.raw)


def test_default_scaling_is_closed_form(doubling, frechet15):
    cfg = EnsembleConfig(doubling, frechet15, 1000, 100)
    b, c = cfg.resolved_scaling()
    assert b == pytest.approx(O.scaling_bn(frechet15, O.LEBESGUE, 1000))
    assert c == pytest.approx(1000 * O.expectation(frechet15, O.LEBESGUE))
    below = O.FrechetObservable.single(X0_IRRATIONAL, 0.7)
    assert EnsembleConfig(doubling, below, 1000, 100).resolved_scaling()[1] == 0.0


@pytest.mark.parametrize("lam", [0.3, 2.5, 17.0])
def test_affine_equivariance(doubling, frechet15, lam):
    base = B.scaled_ensemble(EnsembleConfig(doubling, frechet15, 1000, 100, master_seed=3))
    big = B.scaled_ensemble(EnsembleConfig(doubling, frechet15.scaled(lam), 1000, 100,
                                           master_seed=3))
    np.testing.assert_allclose(big.values.samples, base.values.samples, rtol=1e-12, atol=1e-12)


def test_truncated_sums_drop_large_terms(doubling, frechet15):
    cfg = EnsembleConfig(doubling, frechet15, 1000, 100, master_seed=3, trunc_level=50.0)
    ens = B.scaled_ensemble(cfg)
    xs = D.orbit(doubling, D.sample_rng(3, 0), 1000, burn_in=cfg.burn_in)
    v = O.phi_eval(frechet15, xs)
    assert ens.raw[0] == pytest.approx(v.sum(), rel=1e-12)
    assert ens.truncated[0] == pytest.approx(v[np.abs(v) < 50.0].sum(), rel=1e-12)


def test_ensemble_csv(tmp_path, doubling, frechet15):
    ens = B.scaled_ensemble(EnsembleConfig(doubling, frechet15, 100, 100))
    ens.to_csv(tmp_path / "e.csv")
    rows = list(csv.DictReader(open(tmp_path / "e.csv")))
    assert list(rows[0]) == ["sample", "raw_sum", "scaled"]
    assert float(rows[7]["scaled"]) == ens.scaled[7]


def test_centering_removes_drift(doubling, frechet15):
    mean = O.expectation(frechet15, O.LEBESGUE)
    centred, bare = [], []
    for n in (10 ** 3, 10 ** 4, 10 ** 5):
        b = O.scaling_bn(frechet15, O.LEBESGUE, n)
        ens = B.scaled_ensemble(EnsembleConfig(doubling, frechet15, n, 400, master_seed=n,
                                               b_n=b, c_n=n * mean))
        centred.append(np.median(ens.values.samples))
        bare.append(np.median(ens.raw / b))
    assert max(centred) - min(centred) < 0.5
    # without centering the median grows like n^(1 - 1/alpha) E[phi]
    assert bare[0] < bare[1] < bare[2]
    assert bare[2] - bare[0] > 5.0


# ---------------------------------------------------------------- scaling exponents

def test_scaling_exponent_heavy_tail(doubling):
    obs = O.FrechetObservable.single(X0_IRRATIONAL, 0.7)
    f = B.scaling_exponent(doubling, obs, [100, 1000, 10 ** 4, 10 ** 5], 600, seed=2)
    assert f.alpha_hat == pytest.approx(0.7, abs=0.1)
    assert not f.ambiguous


def test_scaling_exponent_clt(doubling):
    obs = O.FrechetObservable.holder_only(O.HolderPart.polynomial([0.0, 1.0]))
    f = B.scaling_exponent(doubling, obs, [100, 1000, 10 ** 4, 10 ** 5], 600, seed=2)
    assert f.alpha_hat == pytest.approx(2.0, abs=0.1)


def test_scaling_exponent_intermittent(lsv075):
    obs = O.FrechetObservable.holder_only(O.HolderPart.polynomial([1.0, -1.0]))
    # below n ~ 10^4 the excursion structure is not yet self-similar, so reach 10^6
    f = B.scaling_exponent(lsv075, obs, [10 ** 3, 10 ** 4, 10 ** 5, 10 ** 6], 200, seed=4)
    assert f.alpha_hat == pytest.approx(1 / 0.75, abs=0.1)


def test_scaling_exponent_needs_two_decades(doubling, frechet15):
    with pytest.raises(ValueError):
        B.scaling_exponent(doubling, frechet15, [100, 200, 400, 800], 100)


# ---------------------------------------------------------------- regimes

def test_case_iii_window_example():
    lo, hi = B.case_iii_window(2 / 3)
    assert lo == pytest.approx(1.5) and hi == pytest.approx(1.75)


def test_classify_examples():
    r = B.classify_regime(0.4, 1.5, drift=1.0)
    assert (r.case, r.predicted_index) == ("i", 1.5)
    r = B.classify_regime(0.75, 1.6, drift=1.0)
    assert r.case == "ii" and r.predicted_index == pytest.approx(4 / 3)
    assert r.scaling_exponent == 0.75
    assert B.classify_regime(2 / 3, 1.6, drift=0.0).case == "iii"
    out = B.classify_regime(2 / 3, 1.8, drift=0.0)
    assert out.case == "outside" and not out.proven


def test_boundary_is_flagged():
    r = B.classify_regime(0.8, 1.25, drift=1.0)
    assert r.boundary and not r.proven


@given(st.floats(0.0, 0.499), st.floats(0.01, 0.999), st.floats(-5, 5))
def test_small_gamma_and_alpha_is_case_i(gamma, alpha, drift):
    assert B.classify_regime(gamma, alpha, drift).case == "i"


@given(st.floats(0.51, 0.99), st.floats(0.01, 1.99))
def test_drift_decides_above_the_gate(gamma, alpha):
    if 1 / alpha >= gamma:
        return
    assert B.classify_regime(gamma, alpha, 0.3).case == "ii"
    assert B.classify_regime(gamma, alpha, 0.0).case in ("iii", "outside")


@pytest.mark.parametrize("g,a", [(1.0, 1.5), (-0.1, 1.5), (0.5, 2.0), (0.5, 0.0)])
def test_classify_rejects(g, a):
    with pytest.raises(ValueError):
        B.classify_regime(g, a, 0.0)


def test_regime_observables():
    measure = B.default_measure(D.MapSpec.lsv(2 / 3))
    iii = B.regime_observable(2 / 3, 1.6, 0.75, "iii", measure)
    assert O.expectation(iii, measure) == pytest.approx(0.0, abs=1e-10)
    assert O.phi_eval(iii, 0.0) == 0.0
    drift = lambda o: O.phi_eval(o, 0.0) - O.expectation(o, measure)
    ii = B.regime_observable(2 / 3, 1.6, 0.75, "ii", measure)
    i = B.regime_observable(2 / 3, 1.6, 0.75, "i", measure)
    # the boost adds 10 (1 - E[(1 - x)^4]) to the drift
    assert drift(ii) - drift(i) > 5.0
    with pytest.raises(ValueError):
        B.regime_observable(2 / 3, 1.6, 0.3, "iii", measure)
    with pytest.raises(ValueError):
        B.regime_observable(2 / 3, 1.6, 0.75, "iv", measure)


def test_phase_sweep_matches_single_experiment(tmp_path):
    vs = B.phase_sweep([0.4], [1.5], x0=0.7, n=10 ** 4, samples=1000, seed=9)
    ss = np.random.SeedSequence(9, spawn_key=(0, 0))
    single = B.regime_experiment(0.4, 1.5, 0.7, 10 ** 4, 1000, int(ss.generate_state(1)[0]))
    assert vs[0].case == "i" and vs[0].fitted_index == single.fitted_index
    B.write_sweep(vs, tmp_path / "s.csv", tmp_path / "s.json")
    header = next(csv.reader(open(tmp_path / "s.csv")))
    assert header == ["gamma", "alpha", "x0", "case", "predicted_index", "fitted_index",
                      "fitted_beta", "ks", "n", "samples", "seed", "pass"]
    assert json.load(open(tmp_path / "s.json"))[0]["case"] == "i"


def test_phase_sweep_records_failures_and_continues():
    vs = B.phase_sweep([0.0], [2.5, 0.8], n=1000, samples=1000)
    assert vs[0].case == "error" and not vs[0].passed and vs[0].error
    assert vs[1].case == "i"


def test_gamma_zero_agrees_with_small_gamma():
    a = B.regime_experiment(0.0, 0.8, 0.7, 10 ** 4, 2000, seed=1)
    b = B.regime_experiment(0.05, 0.8, 0.7, 10 ** 4, 2000, seed=1)
    assert a.case == b.case == "i"
    assert abs(a.fitted_index - b.fitted_index) <= 0.1
    assert math.isfinite(a.ks) and math.isfinite(b.ks)
