import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from sgfrisk import mp_asymptotics as mp
from sgfrisk import sde_core as sc
from sgfrisk import weak_features as wf


def small(seed=0, n=4, d=6, p=3, mu=0.5):
    return wf.generate_instance(wf.ModelParams(n=n, d=d, p=p, mu=mu), seed)


# instances ------------------------------------------------------------------


def test_noiseless_label():
    X = np.zeros((1, 3))
    X[0, 0] = 2.0
    inst = wf.WeakFeaturesInstance.from_arrays(X, [1.0, 0, 0], [0, 2], mu=0.0)
    assert inst.y[0] == 2.0


def test_generation_deterministic_and_consistent():
    params = wf.ModelParams(n=7, d=9, p=4, mu=0.3, norm_beta=1.7)
    a, b = wf.generate_instance(params, 5), wf.generate_instance(params, 5)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.subset, b.subset) and np.array_equal(a.y, b.y)
    assert np.array_equal(a.y, a.X @ a.beta + 0.3 * a.eps)
    assert np.linalg.norm(a.beta) == pytest.approx(1.7, abs=1e-12)
    assert list(a.subset) == sorted(set(a.subset)) and len(a.subset) == 4
    s = a.svd[1]
    assert np.all(np.diff(s) <= 0) and np.all(s >= 0)


def test_sphere_draws_distance():
    inst = wf.generate_instance(wf.ModelParams(n=400, d=1000, p=100), 0)
    assert abs(np.sum((inst.beta - inst.beta0) ** 2) - 2.0) <= 0.15


def test_params_validation():
    with pytest.raises(ValueError):
        wf.ModelParams(n=3, d=4, p=5)
    with pytest.raises(ValueError):
        wf.ModelParams(n=3, d=4, p=2, gamma=-1.0)
    assert wf.ModelParams(n=3, d=8, p=2).gamma == pytest.approx(1 / 8)


# gradient flow -----------------------------------------------------------------


def test_gf_initial_and_infinite_time():
    inst = small(1, n=3, d=8, p=5)
    b0 = inst.beta0_A
    assert np.array_equal(wf.gf_estimator(inst, b0, 0.0), b0) or np.allclose(wf.gf_estimator(inst, b0, 0.0), b0, atol=1e-15)
    V = inst.svd[2]
    null = V[:, inst.rank:]
    expected = null @ null.T @ b0 + np.linalg.pinv(inst.XA) @ inst.y
    assert np.abs(wf.gf_estimator(inst, b0, 1e6) - expected).max() <= 1e-8
    with pytest.raises(ValueError):
        wf.gf_estimator(inst, b0, -1.0)


def test_gf_matches_ode_3x2():
    inst = small(2, n=3, d=5, p=2)
    traj = sc.solve_ode(wf.sgf_system(inst), inst.beta0_A, 0.0, 1.0, 500)
    exact = wf.gf_estimator(inst, inst.beta0_A, 1.0)
    assert np.linalg.norm(traj.states[-1] - exact) <= 1e-6 * np.linalg.norm(exact)


def test_gf_satisfies_flow_equation():
    inst = small(3, n=6, d=10, p=4)
    b0 = inst.beta0_A
    h = 1e-5
    for t in (0.1, 1.0, 5.0):
        deriv = (wf.gf_estimator(inst, b0, t + h) - wf.gf_estimator(inst, b0, t - h)) / (2 * h)
        b = wf.gf_estimator(inst, b0, t)
        rhs = inst.XA.T @ (inst.y - inst.XA @ b) / inst.n
        assert np.linalg.norm(deriv - rhs) <= 1e-5 * np.linalg.norm(rhs)


def test_null_space_components_fixed():
    inst = small(4, n=3, d=9, p=6)
    V = inst.svd[2]
    null = V[:, inst.rank:]
    b0 = inst.beta0_A
    for t in (0.5, 3.0, 100.0):
        assert np.abs(null.T @ wf.gf_estimator(inst, b0, t) - null.T @ b0).max() <= 1e-12


# noise covariance -------------------------------------------------------------


def test_diffusion_zero_at_interpolation():
    inst = small(0, n=3, d=6, p=4, mu=0.2)
    b = np.linalg.pinv(inst.XA) @ inst.y
    assert np.abs(wf.diffusion_matrix(inst, b)).max() <= 1e-12


def test_diffusion_structure():
    inst = small(5, n=6, d=7, p=4)
    S = wf.diffusion_matrix(inst, np.ones(4))
    H = inst.XA.T @ inst.XA
    cos = np.sum(S * H) / (np.linalg.norm(S) * np.linalg.norm(H))
    assert math.acos(min(1.0, cos)) < 1e-7
    assert np.linalg.eigvalsh(S).min() >= -1e-12 * np.linalg.eigvalsh(S).max()


def test_exact_noise_covariance_closed_form():
    inst = small(6, n=4, d=5, p=3)
    b = np.array([0.3, -1.0, 0.2])
    r = inst.y - inst.XA @ b
    n = inst.n
    closed = inst.XA.T @ (np.diag(r**2) / n - np.outer(r, r) / n**2) @ inst.XA
    assert np.abs(wf.exact_noise_covariance(inst, b) - closed).max() <= 1e-12


def test_diffusion_vs_enumeration_equal_residuals():
    # with equal |residuals| the approximation drops exactly the mean outer product
    rng = np.random.default_rng(0)
    n, d, p = 4, 5, 3
    X = rng.standard_normal((n, d))
    beta = rng.standard_normal(d)
    subset = [0, 2, 4]
    b = rng.standard_normal(p)
    r = 0.7 * np.array([1.0, -1.0, -1.0, 1.0])
    eps = X[:, subset] @ b + r - X @ beta
    inst = wf.WeakFeaturesInstance.from_arrays(X, beta, subset, mu=1.0, eps=eps)
    exact = wf.exact_noise_covariance(inst, b)
    g = inst.XA.T @ (inst.y - inst.XA @ b) / n
    diff = exact - wf.diffusion_matrix(inst, b)
    assert np.abs(diff + np.outer(g, g)).max() <= 1e-12
    assert np.linalg.norm(diff) <= np.linalg.norm(np.outer(g, g)) * (1 + 1e-12)


# risk ------------------------------------------------------------------------


def test_risk_examples():
    beta = np.array([0.6, 0.8])
    assert wf.risk_given_estimator(beta, [0, 1], beta, 0.0) == 0.0
    assert wf.risk_given_estimator(beta, [0, 1], [0.0, 0.0], 0.0) == pytest.approx(0.5)
    assert wf.risk_given_estimator(beta, [0, 1], beta, 0.5) == pytest.approx(0.125)
    assert wf.risk_given_estimator(beta, [1], [0.0], 0.0) == pytest.approx(0.5)


# instance covariance trace ------------------------------------------------------


def test_trace_zero_cases():
    inst = small(0)
    assert wf.instance_covariance_trace(inst, inst.beta0_A, 0.0) == 0.0
    X = np.random.default_rng(1).standard_normal((3, 5))
    beta = np.zeros(5)
    beta[[0, 1, 2, 3]] = [1.0, -0.5, 0.3, 0.2]
    inst = wf.WeakFeaturesInstance.from_arrays(X, beta, [0, 1, 2, 3], mu=0.0)
    b0 = np.linalg.pinv(inst.XA) @ inst.y
    for t in (0.5, 2.0):
        assert abs(wf.instance_covariance_trace(inst, b0, t)) <= 1e-20


def test_trace_matches_engine():
    inst = small(7, n=4, d=6, p=3)
    s = wf.sgf_system(inst)
    traj = sc.solve_ode(s, inst.beta0_A, 0.0, 1.0, 2000)
    eng = np.trace(sc.fluctuation_covariance(s, traj, 1.0, 1e-3).cov_z)
    assert wf.instance_covariance_trace(inst, inst.beta0_A, 1.0) == pytest.approx(eng, rel=1e-4)


def test_tau_rule_two_eigenvalue_oracle():
    # int_0^t s1 e^{-2 s1 tau} s2 e^{-2 s2 (t - tau)} dtau in closed form
    s1, s2 = 0.3, 2.5
    sig = np.array([[s1, s2]])
    for t in (0.01, 1.0, 30.0, 1000.0):
        first, second = wf._tau_integrals(sig, t, 64, 8)
        def k(a, b):
            return t * math.exp(-2 * a * t) if a == b else (math.exp(-2 * a * t) - math.exp(-2 * b * t)) / (2 * (b - a))
        exp_first = sum(a * b * k(a, b) for a in (s1, s2) for b in (s1, s2))
        exp_second = sum(b * k(a, b) for a in (s1, s2) for b in (s1, s2))
        assert first[0] == pytest.approx(exp_first, rel=1e-8, abs=1e-300)
        assert second[0] == pytest.approx(exp_second, rel=1e-8, abs=1e-300)


def test_tau_rule_single_eigenvalue():
    for s in (0.05, 1.0, 4.0):
        for t in (0.1, 5.0, 200.0):
            first, _ = wf._tau_integrals(np.array([[s]]), t, 64, 8)
            assert first[0] == pytest.approx(t * s * s * math.exp(-2 * s * t), rel=1e-8)


# spectra ------------------------------------------------------------------------


@pytest.mark.parametrize("n,p", [(30, 12), (12, 30), (20, 20)])
@pytest.mark.parametrize("sampler", ["dense", "tridiagonal"])
def test_spectra_moments(n, p, sampler):
    R = 3000
    sig = wf.sample_spectra(n, p, R, seed=1, sampler=sampler)
    assert sig.shape == (R, min(n, p))
    m1 = sig.sum(axis=1)
    m2 = (sig**2).sum(axis=1)
    # E tr W = np, E tr W^2 = np(n + p + 1) for W = X^T X, X n x p Gaussian
    assert abs(m1.mean() - p) <= 4 * m1.std() / math.sqrt(R)
    assert abs(m2.mean() - p * (n + p + 1) / n) <= 4 * m2.std() / math.sqrt(R)


def test_samplers_same_law():
    a = wf.sample_spectra(25, 15, 2000, seed=2, sampler="dense")
    b = wf.sample_spectra(25, 15, 2000, seed=3, sampler="tridiagonal")
    for j in (0, 7, 14):
        assert stats.ks_2samp(a[:, j], b[:, j]).pvalue > 1e-3


def test_spectra_cached_and_readonly():
    a = wf.sample_spectra(10, 5, 4, seed=9)
    assert wf.sample_spectra(10, 5, 4, seed=9) is a
    with pytest.raises(ValueError):
        a[0, 0] = 1.0
    with pytest.raises(ValueError):
        wf.sample_spectra(10, 5, 4, seed=9, sampler="bogus")


# finite-size expectations ---------------------------------------------------------


def test_gf_finite_t0():
    params = wf.ModelParams(n=50, d=120, p=30, mu=0.5, delta_sq=1.8)
    v, se = wf.expected_gf_risk_finite(params, 0.0, replicates=10, seed=0)
    assert v == pytest.approx(0.5 * (1.8 * 30 / 120 + (1 - 30 / 120) + 0.25), rel=1e-12)
    assert se <= 1e-15
    with pytest.raises(sc.InsufficientReplicatesError):
        wf.expected_gf_risk_finite(params, 1.0, replicates=1)


def test_gf_finite_large_t_vs_limit():
    params = wf.ModelParams(n=2000, d=5000, p=1000, mu=0.5, delta_sq=2.0)
    v, _ = wf.expected_gf_risk_finite(params, 1e4, replicates=20, seed=0)
    lim = mp.gf_risk_limit(mp.AsymptoticParams(0.5, 2.5, 0.5))
    assert abs(v - lim) <= 0.02 * lim


def test_gf_finite_threshold_blowup():
    base = wf.ModelParams(n=200, d=500, p=100, mu=0.5)
    half, _ = wf.expected_gf_risk_finite(base, 1e3, replicates=20, seed=0)
    at, _ = wf.expected_gf_risk_finite(base.with_p(200), 1e3, replicates=20, seed=0)
    later, _ = wf.expected_gf_risk_finite(base.with_p(200), 1e4, replicates=20, seed=0)
    # at p = n the inverse-eigenvalue term grows like sqrt(t): ~8.7x the p = n/2 value at
    # t = 1e3 (matching the large-system quadrature) and past 10x by t = 1e4
    assert at > 8 * half
    assert later > 10 * half
    assert later / at == pytest.approx(math.sqrt(10), rel=0.1)
    assert at == pytest.approx(mp.gf_risk_asymptotic(mp.AsymptoticParams(1.0, 2.5, 0.5), 1e3), rel=0.05)


def test_threshold_warning():
    with pytest.warns(RuntimeWarning, match="interpolation"):
        wf._warn_threshold(np.array([[1e-12]]))


def test_sgf_finite_zero_and_linearity():
    params = wf.ModelParams(n=30, d=60, p=12, mu=0.5, gamma=0.01)
    v, se = wf.expected_sgf_correction_finite(params, 0.0, replicates=5)
    assert v == 0.0 and se == 0.0
    v1, _ = wf.expected_sgf_correction_finite(params, 2.0, replicates=5)
    p2 = wf.ModelParams(n=30, d=60, p=12, mu=0.5, gamma=0.0005)
    v2, _ = wf.expected_sgf_correction_finite(p2, 2.0, replicates=5)
    assert v2 == pytest.approx(v1 * 0.05, rel=1e-12)
    assert v2 > 0


@pytest.mark.parametrize("p", [10, 25])
def test_sgf_finite_large_t_grouping(p):
    # both printed groupings of the residual term give (gamma/2) c (n - p) p / (2n) at large t
    n, d = 40, 100
    params = wf.ModelParams(n=n, d=d, p=p, mu=0.5, delta_sq=2.0)
    v, _ = wf.expected_sgf_correction_finite(params, 2e3, replicates=5)
    c = params.noise_weight
    eq30 = params.gamma / (2 * n) * c * max(0, (n - p) / 2) * min(n, p)
    c66 = params.gamma / 2 * c * 0.5 * max(0.0, 1 - p / n) * min(n, p)
    assert eq30 == pytest.approx(c66, rel=1e-14)
    assert v == pytest.approx(c66, rel=1e-9)


def test_sgf_finite_matches_instance_average():
    # average of the per-instance trace (exact in beta0) vs the expectation formula
    params = wf.ModelParams(n=6, d=10, p=3, mu=0.5, gamma=0.1)
    t = 1.0
    rng = np.random.default_rng(0)
    vals = []
    for s in range(3000):
        inst = wf.generate_instance(params, rng.integers(2**62))
        vals.append(0.05 * wf.instance_covariance_trace(inst, inst.beta0_A, t, quad_panels=16))
    vals = np.array(vals)
    # beta, beta0 are random here: use E||beta - beta0||^2 = 2 and ||beta|| = 1
    v, se = wf.expected_sgf_correction_finite(params, t, replicates=3000, seed=1)
    tol = 4 * math.hypot(vals.std() / math.sqrt(len(vals)), se)
    assert abs(vals.mean() - v) <= tol


def test_train_error_limits():
    n, d = 40, 100
    c = lambda p: (1 - p / d) + 0.25
    below = wf.ModelParams(n=n, d=d, p=10, mu=0.5)
    v, _ = wf.expected_train_error_finite(below, 1e4, replicates=5)
    assert v == pytest.approx(c(10) * (1 - 10 / n) / 2, rel=1e-10)
    above = wf.ModelParams(n=n, d=d, p=60, mu=0.5)
    v, _ = wf.expected_train_error_finite(above, 1e5, replicates=5)
    assert v <= 1e-10
    sig = wf.sample_spectra(n, 10, 50, 0)
    v0, _ = wf.expected_train_error_finite(below, 0.0, replicates=50, seed=0)
    expected = 0.5 * (2.0 / d * sig.sum(axis=1).mean() + c(10) * (10 / n + 1 - 10 / n))
    assert v0 == pytest.approx(expected, rel=1e-12)


def test_train_error_monotone_per_instance():
    for seed in range(5):
        inst = small(seed, n=8, d=12, p=5)
        ts = np.linspace(0, 20, 80)
        res = wf._residual_sq(inst, inst.beta0_A, ts)
        assert np.all(np.diff(res) <= 1e-12)


def test_gf_finite_vs_direct_instance_average():
    params = wf.ModelParams(n=15, d=30, p=6, mu=0.5, delta_sq=2.0)
    t = 2.0
    rng = np.random.default_rng(3)
    vals = []
    for _ in range(4000):
        inst = wf.generate_instance(params, rng.integers(2**62))
        b = wf.gf_estimator(inst, inst.beta0_A, t)
        vals.append(wf.risk_given_estimator(inst.beta, inst.subset, b, params.mu))
    vals = np.array(vals)
    v, se = wf.expected_gf_risk_finite(params, t, replicates=4000, seed=0)
    assert abs(vals.mean() - v) <= 4 * math.hypot(vals.std() / math.sqrt(len(vals)), se)


# SGD / GD ----------------------------------------------------------------------


def test_gd_richardson():
    inst = small(8, n=10, d=15, p=5)
    gf = wf.risk_given_estimator(inst.beta, inst.subset, wf.gf_estimator(inst, inst.beta0_A, 2.0), inst.mu)
    gaps = []
    for gamma in (0.02, 0.01):
        iters = int(round(2.0 / gamma))
        r = wf.sgd_run(inst, inst.beta0_A, gamma, iters, "gd", record_at=[iters]).risks[-1]
        gaps.append(r - gf)
    assert gaps[1] / gaps[0] == pytest.approx(0.5, rel=0.3)


def test_gd_deterministic_and_methods_agree():
    inst = small(9, n=10, d=15, p=5)
    a = wf.sgd_run(inst, inst.beta0_A, 0.05, 300, "gd", record_every=30, seed=1)
    b = wf.sgd_run(inst, inst.beta0_A, 0.05, 300, "gd", record_every=30, seed=2)
    c = wf.sgd_run(inst, inst.beta0_A, 0.05, 300, "gd", record_every=30, gd_method="loop")
    assert np.array_equal(a.risks, b.risks)
    assert np.abs(a.risks - c.risks).max() <= 1e-12
    assert list(a.times) == pytest.approx(list(a.iterations * 0.05))


def test_sgd_scalar_recursion():
    inst = wf.WeakFeaturesInstance.from_arrays(np.ones((1, 1)), [1.0], [0], mu=0.0)
    tr = wf.sgd_run(inst, [0.0], 0.1, 20, "sgd", record_every=1, seed=0)
    expected = 0.5 * (0.9 ** (2 * np.arange(21)))
    assert np.abs(tr.risks - expected).max() <= 1e-15


def test_sgd_minibatch_full_batch_equals_gd_average():
    # batch of all n samples (with replacement) has expectation equal to GD: check one step
    inst = small(1, n=5, d=8, p=3)
    idx = np.arange(5)[None, :]
    from sgfrisk import kernels

    sq = kernels.sgd_path(inst.XA, inst.y, inst.beta0_A, idx, 0.1, [1], inst.beta_A)
    gd = wf.sgd_run(inst, inst.beta0_A, 0.1, 1, "gd", record_at=[1])
    rest = inst.beta[inst.complement]
    assert 0.5 * (sq[0] + rest @ rest + inst.mu**2) == pytest.approx(gd.risks[0], rel=1e-13)


def test_sgd_divergence_message():
    inst = small(2, n=10, d=12, p=6)
    with pytest.raises(sc.DivergenceError, match="gamma"):
        wf.sgd_run(inst, inst.beta0_A, 50.0, 2000, "sgd", record_every=100)
    with pytest.raises(sc.DivergenceError):
        wf.sgd_run(inst, inst.beta0_A, 50.0, 2000, "gd", record_every=100)
    with pytest.raises(ValueError):
        wf.sgd_run(inst, inst.beta0_A, 0.1, 10, "adam")


def test_sgd_minus_gd_small_t():
    params = wf.ModelParams(n=40, d=100, p=20, mu=0.5)
    curve = wf.sgd_minus_gd_expectation(params, [0.0, 0.01], subsets=200, seed=0)
    assert abs(curve.mean[0]) <= 1e-12
    theory, tse = wf.expected_sgf_correction_finite(
        params.with_vectors(*params.draw_vectors(sc.replicate_rng(0, 0))), curve.times[1], replicates=50)
    assert abs(curve.mean[1] - theory) <= 3 * curve.stderr[1] + 3 * tse
    with pytest.raises(sc.InsufficientReplicatesError):
        wf.sgd_minus_gd_expectation(params, [1.0], subsets=1)


def test_sgd_minus_gd_workers_identical():
    params = wf.ModelParams(n=20, d=50, p=8, mu=0.5)
    a = wf.sgd_minus_gd_expectation(params, [0.5, 2.0], subsets=12, seed=4)
    b = wf.sgd_minus_gd_expectation(params, [0.5, 2.0], subsets=12, seed=4, workers=3)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.stderr, b.stderr)


def test_gd_risk_expectation_matches_gf_theory():
    params = wf.ModelParams(n=40, d=100, p=20, mu=0.5)
    t, mean, se = wf.gd_risk_expectation(params, [1.0, 5.0], subsets=400, seed=0)
    beta, beta0 = params.draw_vectors(sc.replicate_rng(0, 0))
    theory, _ = wf.expected_gf_risk_finite(params.with_vectors(beta, beta0), t, replicates=400)
    # GD with gamma = 1/d differs from GF by O(gamma)
    assert np.all(np.abs(mean - theory) <= 4 * se + 0.02 * theory)


# risk curves -----------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 40), st.integers(1, 60), st.floats(0, 2), st.integers(0, 1000))
def test_risk_curve_decomposition(n, p, mu, seed):
    d = max(p, 30)
    params = wf.ModelParams(n=n, d=d, p=p, mu=mu)
    curve = wf.risk_curve_finite(params, np.array([0.0, 0.3, 3.0]), replicates=4, seed=seed, quad_panels=16)
    assert np.array_equal(curve.sgf_risk, curve.gf_risk + curve.sgf_correction)
    assert np.all(curve.sgf_correction >= -curve.sgf_se)
