import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgfrisk import experiments as ex
from sgfrisk import mp_asymptotics as mp


def test_config_derived_sizes():
    c = ex.ExperimentConfig(kind="phase_sweep", alphas=(0.5, 1.5), d=200)
    assert c.n == 80 and c.p_for(0.5) == 40 and c.p_for(1.5) == 120
    assert c.gamma == pytest.approx(1 / 200)
    assert c.name == "phase_sweep"


@pytest.mark.parametrize("bad", [
    dict(alphas=()),
    dict(alphas=(0.5, 0.4)),
    dict(alphas=(0.5, 3.0)),
    dict(times=(1.0, 1.0)),
    dict(times=(-1.0, 1.0)),
    dict(times=(1.0, math.inf)),
    dict(kind="nope"),
    dict(scenario="nope"),
    dict(subsets=1),
    dict(gamma_prime=0.0),
    dict(workers=0),
])
def test_config_rejects(bad):
    base = dict(kind="heatmap")
    base.update(bad)
    with pytest.raises(ex.ConfigError):
        ex.ExperimentConfig(**base)


def test_unknown_key_named():
    with pytest.raises(ex.ConfigError, match="colour"):
        ex.ExperimentConfig.from_dict({"kind": "heatmap", "colour": 1})


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 2.5), min_size=1, max_size=5, unique=True),
       st.floats(0.0, 2.0), st.integers(0, 2**31), st.integers(1, 8))
def test_config_round_trip(alphas, mu, seed, workers):
    c = ex.ExperimentConfig(kind="time_sweep", alphas=tuple(sorted(alphas)), mu=mu, seed=seed,
                            workers=workers)
    assert ex.ExperimentConfig.from_dict(c.to_dict()) == c
    assert c.replace(mu=mu) == c


def test_presets():
    for name in ex.PRESETS:
        c = ex.preset(name)
        assert c.name == name
    assert ex.preset("fig2-desk").n == 80
    assert ex.preset("fig2-paper", subsets=10).subsets == 10
    with pytest.raises(ex.ConfigError):
        ex.preset("fig9")


def test_csv_format():
    r = ex.ExperimentResult("x", "heatmap", ("a", "b", "c", "d"),
                            [(0.1, True, 3, math.nan), (1e-20, False, np.int64(4), math.inf)])
    text = r.to_csv()
    assert text == "a,b,c,d\r\n0.1,1,3,nan\r\n1e-20,0,4,inf\r\n"
    np.testing.assert_array_equal(r.column("c"), [3, 4])


# heatmap --------------------------------------------------------------------------

HEAT = dict(kind="heatmap", alphas=(0.3, 0.6, 0.9, 1.2, 1.6, 2.0), times=(0.0, 0.3, 1.0, 3.0, 3000.0))


def test_heatmap_rows_and_edges():
    r = ex.run(ex.ExperimentConfig(**HEAT))
    assert r.columns == ("t", "alpha", "value")
    keys = [(row[0], row[1]) for row in r.rows]
    assert keys == sorted(keys) and len(keys) == 30
    t, a, v = (r.column(c) for c in r.columns)
    assert np.all(v[t == 0] == 0)
    assert np.all(v >= 0)
    # the slowest mode relaxes at rate (1 - sqrt(alpha))^2, about 5e-3 for alpha = 1.2
    late = (t == 3000.0) & (a >= 1)
    assert np.all(v[late] < 1e-6)
    for alpha in (0.3, 0.6, 0.9):
        lim = mp.sgf_correction_limit(ex.ExperimentConfig(**HEAT).asymptotic_params(alpha))
        assert v[(t == 3000.0) & (a == alpha)][0] == pytest.approx(lim, abs=1e-6)


def test_heatmap_ridge_moves_down():
    cfg = ex.ExperimentConfig(kind="heatmap", alphas=tuple(np.round(np.linspace(0.1, 2.5, 13), 10)),
                              times=ex.log_grid(0.3, 30, 7))
    ridge = [a for _, a in ex.ridge_location(ex.run(cfg))]
    assert all(b <= a for a, b in zip(ridge, ridge[1:]))
    assert ridge[0] > 1.0 > ridge[-1]


# gf curves ------------------------------------------------------------------------


def test_gf_curves_double_descent_and_early_stopping():
    cfg = ex.ExperimentConfig(kind="gf_curves", alphas=(0.25, 0.5, 0.9, 1.5, 2.0), d=100, replicates=4,
                              times=ex.log_grid(1e-2, 1e3, 11), simulate=False)
    r = ex.run(cfg)
    a, t, g = r.column("alpha"), r.column("t"), r.column("gf_risk_asymptotic")
    assert np.all(r.column("converged") == 1)
    last = t == t.max()
    # at late times the peak sits at the alpha closest to 1
    assert a[last][np.argmax(g[last])] == 0.9
    for alpha in np.unique(a):
        curve = g[a == alpha]
        assert curve.min() < curve[0] and curve.min() < curve[-1]
    assert np.all(np.isnan(r.column("gd_mean")))


def test_gf_curves_gd_points_near_theory():
    cfg = ex.ExperimentConfig(kind="gf_curves", alphas=(0.5, 2.0), d=100, replicates=20, subsets=60,
                              times=(0.1, 1.0, 10.0))
    r = ex.run(cfg)
    gd, se, fin = r.column("gd_mean"), r.column("gd_se"), r.column("gf_risk_finite")
    assert np.all(se > 0)
    # finite-size theory is the comparison at d = 100; allow for its own SE
    z = (gd - fin) / np.hypot(se, r.column("gf_finite_se"))
    assert np.all(np.abs(z) <= 4)


# simulations ----------------------------------------------------------------------


def test_phase_sweep_small():
    cfg = ex.ExperimentConfig(kind="phase_sweep", alphas=(0.5, 1.5), d=50, subsets=40, t_large=20,
                              replicates=4)
    r = ex.run(cfg)
    assert r.column("theory_limit")[1] == 0.0
    assert np.all(r.column("sim_se") > 0)
    assert list(r.columns[:4]) == ["alpha", "p", "alpha_eff", "t"]


def test_time_sweep_workers_byte_identical():
    kw = dict(kind="time_sweep", alphas=(0.5,), d=50, subsets=12, replicates=4, times=(0.05, 1.0, 5.0))
    a = ex.run(ex.ExperimentConfig(workers=1, **kw)).to_csv()
    b = ex.run(ex.ExperimentConfig(workers=3, **kw)).to_csv()
    c = ex.run(ex.ExperimentConfig(workers=1, **kw)).to_csv()
    assert a == b == c
    d = ex.run(ex.ExperimentConfig(workers=1, seed=1, **kw)).to_csv()
    assert d != a


def test_time_sweep_regimes():
    cfg = ex.ExperimentConfig(kind="time_sweep", alphas=(0.5,), d=50, subsets=12, replicates=4,
                              times=(0.05, 0.5, 3.0, 150.0), simulate=False)
    r = ex.run(cfg)
    assert [row[8] for row in r.rows] == ["early", "transition", "intermediate", "late"]
    assert np.all(np.isnan(r.column("sim_mean")))
    assert r.column("iterations")[0] == round(0.05 * 50)


@pytest.mark.parametrize("scenario", ["constant", "pinning", "time_varying"])
def test_sde_validation_linear(scenario):
    cfg = ex.ExperimentConfig(kind="sde_validation", scenario=scenario, times=(0.5, 1.0, 2.0),
                              mc_replicates=4000)
    r = ex.run(cfg)
    assert np.all(r.column("pass_engine") == 1)
    assert np.all(np.abs(r.column("mc_z")) <= 4)
    assert "wall_time_s" in r.meta and r.meta["seed"] == 0


def test_sde_validation_weak_features():
    cfg = ex.ExperimentConfig(kind="sde_validation", scenario="weakfeatures", times=(0.5, 1.0, 2.0),
                              mc_replicates=3000)
    r = ex.run(cfg)
    assert np.all(r.column("rel_err") <= 1e-4)
    assert np.all(np.abs(r.column("mc_z")) <= 4)
