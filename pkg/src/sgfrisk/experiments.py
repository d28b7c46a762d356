"""Experiment drivers: phase sweep, time sweep, heatmap, GF curves, SDE validation.

Every driver takes an :class:`ExperimentConfig` and returns an
:class:`ExperimentResult` whose rows are fully determined by the config (the
wall time lives only in the metadata).
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from . import mp_asymptotics as mp
from . import sde_core as sc
from . import weak_features as wf

KINDS = ("phase_sweep", "time_sweep", "heatmap", "sde_validation", "gf_curves")
SCENARIOS = ("constant", "pinning", "time_varying", "weakfeatures")


class ConfigError(ValueError):
    pass


def log_grid(lo, hi, points):
    return tuple(float(v) for v in np.geomspace(lo, hi, points))


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines an experiment's output.

    Simulation sizes: ``d`` features, ``n = round(d/psi)`` samples and
    ``p = round(alpha*n)`` learned features for every ``alpha``; the
    learning rate is ``gamma_prime/d``.
    """

    kind: str
    name: str = ""
    alphas: tuple = (0.5,)
    times: tuple = log_grid(1e-3, 1e3, 13)
    psi: float = 2.5
    mu: float = 0.5
    gamma_prime: float = 1.0
    norm_beta_sq: float = 1.0
    delta_sq: float = 2.0
    d: int = 200
    subsets: int = 300
    sgd_seeds: int = 1
    batch_size: int = 1
    replicates: int = 100
    seed: int = 0
    workers: int = 1
    t_large: float = 50.0
    quad_nodes: int = 400
    quad_panels: int = 64
    simulate: bool = True
    scenario: str = "constant"
    steps: int = 2000
    mc_replicates: int = 20000
    sde_gamma: float = 0.01
    t_end: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))
        if not self.name:
            object.__setattr__(self, "name", self.kind)
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        for label, grid in (("alphas", self.alphas), ("times", self.times)):
            if not grid:
                raise ConfigError(f"{label} grid is empty")
            if any(b <= a for a, b in zip(grid, grid[1:])):
                raise ConfigError(f"{label} grid must be strictly increasing")
            if not all(math.isfinite(v) for v in grid):
                raise ConfigError(f"{label} grid must be finite")
        if self.times[0] < 0:
            raise ConfigError("times must be nonnegative")
        if self.psi <= 0:
            raise ConfigError("psi must be positive")
        if self.alphas[0] <= 0 or self.alphas[-1] > self.psi:
            raise ConfigError(f"alpha grid must lie in (0, psi] = (0, {self.psi}] (p <= d)")
        if self.mu < 0 or self.gamma_prime <= 0 or self.norm_beta_sq < 0 or self.delta_sq < 0:
            raise ConfigError("need mu >= 0, gamma_prime > 0, norm_beta_sq >= 0, delta_sq >= 0")
        if self.d < 1 or self.n < 1:
            raise ConfigError("need d >= 1 and d/psi >= 1")
        if self.subsets < 2 or self.replicates < 2 or self.mc_replicates < 2:
            raise ConfigError("subsets, replicates and mc_replicates must be >= 2")
        if self.sgd_seeds < 1 or self.batch_size < 1 or self.workers < 1 or self.steps < 1:
            raise ConfigError("sgd_seeds, batch_size, workers and steps must be >= 1")
        if self.t_large <= 0 or self.t_end <= 0 or self.sde_gamma < 0:
            raise ConfigError("need t_large > 0, t_end > 0, sde_gamma >= 0")
        if self.quad_nodes < 16 or self.quad_panels < 2:
            raise ConfigError("need quad_nodes >= 16 and quad_panels >= 2")

    @property
    def n(self):
        return max(1, int(round(self.d / self.psi)))

    @property
    def gamma(self):
        return self.gamma_prime / self.d

    def p_for(self, alpha):
        return min(self.d, max(1, int(round(alpha * self.n))))

    def model_params(self, alpha):
        return wf.ModelParams(n=self.n, d=self.d, p=self.p_for(alpha), mu=self.mu,
                              gamma_prime=self.gamma_prime, norm_beta=math.sqrt(self.norm_beta_sq),
                              delta_sq=self.delta_sq, batch_size=self.batch_size)

    def asymptotic_params(self, alpha, **kw):
        base = dict(alpha=alpha, psi=self.psi, mu=self.mu, gamma_prime=self.gamma_prime,
                    norm_beta_sq=self.norm_beta_sq, delta_sq=self.delta_sq)
        base.update(kw)
        return mp.AsymptoticParams(**base)

    def to_dict(self):
        out = asdict(self)
        out["alphas"] = list(self.alphas)
        out["times"] = list(self.times)
        return out

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        return cls(**data)

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return ExperimentConfig.from_dict(d)


@dataclass
class ExperimentResult:
    name: str
    kind: str
    columns: tuple
    rows: list
    meta: dict = field(default_factory=dict)

    def column(self, name):
        j = self.columns.index(name)
        return np.array([r[j] for r in self.rows])

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_fmt(v) for v in row])
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return repr(v) if math.isfinite(v) else ("nan" if v != v else ("inf" if v > 0 else "-inf"))
    return str(v)


def _result(cfg, columns, rows, started, **extra):
    meta = {"config": cfg.to_dict(), "seed": cfg.seed, "version": __version__,
            "numpy": np.__version__, "wall_time_s": round(time.perf_counter() - started, 3)}
    meta.update(extra)
    return ExperimentResult(cfg.name, cfg.kind, tuple(columns), rows, meta)


def _converged(f, value, rel=1e-6):
    """Theory convergence flag: recompute with doubled quadrature resolution."""
    again = f()
    return abs(again - value) <= rel * max(abs(value), 1e-12)


# ---------------------------------------------------------------------------


def run_phase_sweep(cfg):
    """SGD - GD at ``t_large`` against the infinite-time SGF correction, per alpha."""
    started = time.perf_counter()
    columns = ("alpha", "p", "alpha_eff", "t", "theory_limit", "theory_asymptotic_t",
               "theory_finite_t", "finite_se", "sim_mean", "sim_se", "z_score", "within_3se")
    rows = []
    for alpha in cfg.alphas:
        params = cfg.model_params(alpha)
        a_eff = params.p / params.n
        sim = wf.sgd_minus_gd_expectation(params, [cfg.t_large], cfg.subsets, cfg.sgd_seeds,
                                          cfg.seed, cfg.workers)
        t = float(sim.times[-1])
        ap = cfg.asymptotic_params(a_eff, psi=cfg.d / params.n, norm_beta_sq=sim.norm_beta_sq,
                                   delta_sq=sim.delta_sq)
        limit = mp.sgf_correction_limit(ap)
        asym_t = mp.sgf_correction_asymptotic(ap, t, cfg.quad_nodes)
        fparams = params.with_vectors(*params.draw_vectors(sc.replicate_rng(cfg.seed, 0)))
        fin, fin_se = wf.expected_sgf_correction_finite(fparams, t, cfg.replicates, cfg.quad_panels,
                                                        seed=cfg.seed)
        mean, se = float(sim.mean[-1]), float(sim.stderr[-1])
        z = (mean - limit) / se if se > 0 else math.inf
        rows.append((alpha, params.p, a_eff, t, limit, asym_t, fin, fin_se, mean, se, z,
                     abs(z) <= 3.0))
    return _result(cfg, columns, rows, started)


def _regime(t):
    if t <= 0.1:
        return "early"
    if t >= 100:
        return "late"
    if 1 <= t <= 10:
        return "intermediate"
    return "transition"


def run_time_sweep(cfg):
    """Asymptotic, finite-size and simulated SGF-GF differences along a time grid."""
    started = time.perf_counter()
    columns = ("alpha", "t", "iterations", "theory_asymptotic", "theory_finite", "finite_se",
               "sim_mean", "sim_se", "regime", "within_tol", "sim_above_theory")
    rows = []
    for alpha in cfg.alphas:
        params = cfg.model_params(alpha)
        a_eff = params.p / params.n
        beta, beta0 = params.draw_vectors(sc.replicate_rng(cfg.seed, 0))
        fixed = params.with_vectors(beta, beta0)
        pts = np.unique(np.rint(np.asarray(cfg.times) / params.gamma).astype(np.int64))
        ts = pts * params.gamma
        ap = cfg.asymptotic_params(a_eff, psi=cfg.d / params.n, norm_beta_sq=fixed.norm_beta_sq,
                                   delta_sq=fixed.delta_sq_value)
        asym = [mp.sgf_correction_asymptotic(ap, float(t), cfg.quad_nodes) for t in ts]
        fin, fin_se = wf.expected_sgf_correction_finite(fixed, ts, cfg.replicates, cfg.quad_panels,
                                                        seed=cfg.seed)
        if cfg.simulate and pts[-1] >= 1:
            sim = wf.sgd_minus_gd_expectation(fixed, ts, cfg.subsets, cfg.sgd_seeds, cfg.seed,
                                              cfg.workers)
            sim_mean, sim_se = sim.mean, sim.stderr
        else:
            sim_mean = sim_se = np.full(len(ts), math.nan)
        for k, t in enumerate(ts):
            th, m, s = asym[k], float(sim_mean[k]), float(sim_se[k])
            within = abs(m - th) <= max(3 * s, 0.1 * abs(th), 1e-12) if math.isfinite(m) else False
            rows.append((alpha, float(t), int(pts[k]), th, float(fin[k]), float(fin_se[k]), m, s,
                         _regime(float(t)), within, bool(m >= th) if math.isfinite(m) else False))
    return _result(cfg, columns, rows, started)


def run_heatmap(cfg):
    """Asymptotic SGF correction on the (t, alpha) grid, long form sorted by (t, alpha)."""
    started = time.perf_counter()
    rows = []
    for t in cfg.times:
        for alpha in cfg.alphas:
            ap = cfg.asymptotic_params(alpha)
            v = mp.sgf_correction_asymptotic(ap, t, cfg.quad_nodes)
            rows.append((t, alpha, v))
    limits = {a: mp.sgf_correction_limit(cfg.asymptotic_params(a)) for a in cfg.alphas}
    return _result(cfg, ("t", "alpha", "value"), rows, started,
                   limits={repr(a): v for a, v in limits.items()})


def ridge_location(result):
    """alpha of the maximum at every t of a heatmap result."""
    t = result.column("t")
    a = result.column("alpha")
    v = result.column("value")
    out = []
    for tk in np.unique(t):
        m = t == tk
        out.append((float(tk), float(a[m][np.argmax(v[m])])))
    return out


def run_gf_curves(cfg):
    """Asymptotic GF risk and train error over (t, alpha), with GD simulation points."""
    started = time.perf_counter()
    columns = ("alpha", "t", "gf_risk_asymptotic", "gf_risk_finite", "gf_finite_se",
               "train_error_asymptotic", "train_error_finite", "gd_mean", "gd_se", "converged")
    rows = []
    for alpha in cfg.alphas:
        params = cfg.model_params(alpha)
        beta, beta0 = params.draw_vectors(sc.replicate_rng(cfg.seed, 0))
        fixed = params.with_vectors(beta, beta0)
        pts = np.unique(np.rint(np.asarray(cfg.times) / params.gamma).astype(np.int64))
        ts = pts * params.gamma
        ap = cfg.asymptotic_params(alpha, norm_beta_sq=fixed.norm_beta_sq, delta_sq=fixed.delta_sq_value)
        gf_fin, gf_se = wf.expected_gf_risk_finite(fixed, ts, cfg.replicates, cfg.seed)
        tr_fin, _ = wf.expected_train_error_finite(fixed, ts, cfg.replicates, cfg.seed)
        if cfg.simulate and pts[-1] >= 1:
            _, gd_mean, gd_se = wf.gd_risk_expectation(fixed, ts, cfg.subsets, cfg.seed, cfg.workers)
        else:
            gd_mean = gd_se = np.full(len(ts), math.nan)
        for k, t in enumerate(ts):
            t = float(t)
            g = mp.gf_risk_asymptotic(ap, t, cfg.quad_nodes)
            ok = _converged(lambda: mp.gf_risk_asymptotic(ap, t, 2 * cfg.quad_nodes), g)
            rows.append((alpha, t, g, float(gf_fin[k]), float(gf_se[k]),
                         mp.train_error_asymptotic(ap, t, cfg.quad_nodes), float(tr_fin[k]),
                         float(gd_mean[k]), float(gd_se[k]), ok))
    return _result(cfg, columns, rows, started)


def _weak_features_validation(cfg, started):
    params = wf.ModelParams(n=4, d=6, p=3, mu=cfg.mu, gamma=cfg.sde_gamma if cfg.sde_gamma > 0 else 1e-3)
    inst = wf.generate_instance(params, cfg.seed)
    system = wf.sgf_system(inst)
    traj = sc.solve_ode(system, inst.beta0_A, 0.0, cfg.t_end, cfg.steps)
    ts = sorted({float(traj.grid[traj.index(t)]) for t in cfg.times if t <= cfg.t_end})
    ens = sc.sample_paths(system, inst.beta0_A, params.gamma, traj.dt, cfg.steps, cfg.mc_replicates,
                          cfg.seed, workers=cfg.workers, record_at=[traj.index(t) for t in ts])
    columns = ("t", "trace_engine", "trace_closed_form", "rel_err", "trace_mc", "trace_mc_se",
               "mc_z", "mean_dev_max", "pass_engine", "pass_mc")
    rows = []
    covs = sc.covariance_path(system, traj)
    for tk in ts:
        k = traj.index(tk)
        eng = float(np.trace(covs[k]))
        cf = wf.instance_covariance_trace(inst, inst.beta0_A, tk, cfg.quad_panels)
        rel = abs(eng - cf) / cf if cf > 0 else abs(eng - cf)
        Z = (ens.paths[:, ens.index(tk)] - traj.states[k]) / math.sqrt(params.gamma)
        sq = np.sum((Z - Z.mean(axis=0)) ** 2, axis=1)
        trace_mc = float(sq.mean() * len(sq) / (len(sq) - 1))
        se = float(sq.std(ddof=1) / math.sqrt(len(sq)))
        z = (trace_mc - eng) / se if se > 0 else 0.0
        md = float(np.max(np.abs(Z.mean(axis=0))))
        rows.append((tk, eng, cf, rel, trace_mc, se, z, md, rel <= 1e-4, abs(z) <= 4))
    return _result(cfg, columns, rows, started)


def run_sde_validation(cfg):
    """Exact vs engine vs Monte Carlo mean/variance for a linear scenario (or the
    covariance trace for a small weak-features instance)."""
    started = time.perf_counter()
    if cfg.scenario == "weakfeatures":
        return _weak_features_validation(cfg, started)
    sde = sc.linear_scenario(cfg.scenario, gamma=cfg.sde_gamma)
    system = sde.as_system()
    traj = sc.solve_ode(system, [sde.w0], sde.t0, cfg.t_end, cfg.steps)
    covs = sc.covariance_path(system, traj)
    ts = sorted({float(traj.grid[traj.index(t)]) for t in cfg.times if t <= cfg.t_end})
    ens = sc.sample_paths(system, [sde.w0], sde.gamma, traj.dt, cfg.steps, cfg.mc_replicates,
                          cfg.seed, workers=cfg.workers, record_at=[traj.index(t) for t in ts])
    columns = ("t", "mean_exact", "mean_engine", "var_exact", "var_engine", "rel_err_mean",
               "rel_err_var", "mean_mc", "var_mc", "var_mc_se", "mc_z", "pass_engine", "pass_mc")
    rows = []
    for t in ts:
        k = traj.index(t)
        m_ex, v_ex = sc.linear_sde_exact(sde, t)
        m_en = float(traj.states[k][0])
        v_en = float(sde.gamma * covs[k][0, 0])
        rel_m = abs(m_en - m_ex) / max(abs(m_ex), 1e-300)
        rel_v = abs(v_en - v_ex) / v_ex if v_ex > 0 else abs(v_en)
        w = ens.paths[:, ens.index(t), 0]
        v_mc = float(w.var(ddof=1))
        c = (w - w.mean()) ** 2
        se = float(c.std(ddof=1) / math.sqrt(len(w)))
        z = (v_mc - v_en) / se if se > 0 else 0.0
        rows.append((t, m_ex, m_en, v_ex, v_en, rel_m, rel_v, float(w.mean()), v_mc, se, z,
                     max(rel_m, rel_v) <= 1e-5, abs(z) <= 3))
    return _result(cfg, columns, rows, started)


RUNNERS = {
    "phase_sweep": run_phase_sweep,
    "time_sweep": run_time_sweep,
    "heatmap": run_heatmap,
    "gf_curves": run_gf_curves,
    "sde_validation": run_sde_validation,
}


def run(cfg):
    return RUNNERS[cfg.kind](cfg)


# presets ------------------------------------------------------------------

DESK_ALPHAS = (0.125, 0.25, 0.375, 0.5, 0.75, 1.25, 1.75, 2.25)

PRESETS = {
    "fig2-desk": dict(kind="phase_sweep", alphas=DESK_ALPHAS, d=200, subsets=300),
    "fig2-paper": dict(kind="phase_sweep", alphas=tuple(np.round(np.arange(0.1, 2.5, 0.1), 10)),
                       d=1000, subsets=1000),
    "fig3": dict(kind="time_sweep", alphas=(0.5, 1.5), d=200, subsets=300),
    "fig4": dict(kind="heatmap", alphas=tuple(np.round(np.linspace(0.1, 2.5, 25), 10)),
                 times=log_grid(1e-2, 1e2, 17)),
    "fig5": dict(kind="gf_curves", alphas=(0.25, 0.5, 0.9, 1.5, 2.0), times=log_grid(1e-2, 1e3, 11),
                 d=1000, subsets=100),
    "fig6-d100": dict(kind="time_sweep", alphas=(0.25, 0.5, 1.5, 2.0), d=100, subsets=1000),
    "fig6-d1000": dict(kind="time_sweep", alphas=(0.25, 0.5, 1.5, 2.0), d=1000, subsets=200),
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    d = dict(PRESETS[name], name=name)
    d.update(overrides)
    return ExperimentConfig.from_dict(d)
