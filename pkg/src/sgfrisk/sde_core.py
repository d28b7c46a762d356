"""Small-learning-rate fluctuation engine for Ito SDEs

    dw = f(tau, w) dtau + sqrt(gamma) G(tau, w) deta,   w in R^d, eta in R^n.

The deterministic flow ``w_ode`` is integrated with RK4; fluctuations around it
are Gaussian with covariance ``gamma * cov_z(t)`` where

    cov_z(t) = int_{t0}^{t} U(t, s) G G^T(s) U(t, s)^T ds

and ``U`` is the time-ordered exponential of the drift Jacobian along the flow.
Sign convention: ``U`` is generated by ``+J_f`` (for a gradient flow ``J_f`` is
minus the loss Hessian).
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from scipy import integrate
from scipy.linalg import expm

__all__ = [
    "DivergenceError",
    "DegenerateDensityError",
    "InsufficientReplicatesError",
    "SdeSystem",
    "OdeTrajectory",
    "FluctuationCovariance",
    "PathEnsemble",
    "FluctuationStats",
    "LinearSde1d",
    "solve_ode",
    "jacobian_fd",
    "propagator",
    "fluctuation_covariance",
    "covariance_path",
    "transition_density",
    "sample_paths",
    "linear_sde_exact",
    "empirical_fluctuation_stats",
    "linear_scenario",
    "replicate_rng",
]


class DivergenceError(FloatingPointError):
    """A trajectory or iterate became non-finite."""


class DegenerateDensityError(ValueError):
    """The fluctuation covariance has no support direction at all."""


class InsufficientReplicatesError(ValueError):
    pass


def replicate_rng(seed, *keys):
    """Generator for task ``keys`` derived from a master seed (schedule independent)."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


@dataclass(frozen=True)
class SdeSystem:
    """Drift ``f(tau, w) -> (d,)`` and diffusion ``G(tau, w) -> (d, n)``.

    With ``vectorized=True`` every callable must also accept a batch of states
    of shape ``(R, d)`` and return ``(R, d)``, ``(R, d, n)`` and ``(R, d, d)``.
    ``conservative`` marks drifts of the form ``-grad(Phi)``; only those admit
    the improved drift used by :func:`sample_paths`.
    """

    dim_state: int
    dim_noise: int
    drift: Callable
    diffusion: Callable
    jacobian: Optional[Callable] = None
    conservative: bool = False
    vectorized: bool = False

    def __post_init__(self):
        if self.dim_state < 1 or self.dim_noise < 1:
            raise ValueError("dim_state and dim_noise must be positive")

    def f(self, tau, w):
        out = np.asarray(self.drift(tau, w), dtype=float)
        if out.shape != (self.dim_state,):
            raise ValueError(f"drift returned shape {out.shape}, expected ({self.dim_state},)")
        return out

    def G(self, tau, w):
        out = np.asarray(self.diffusion(tau, w), dtype=float)
        if out.shape != (self.dim_state, self.dim_noise):
            raise ValueError(
                f"diffusion returned shape {out.shape}, expected ({self.dim_state}, {self.dim_noise})"
            )
        return out

    def J(self, tau, w):
        if self.jacobian is None:
            return jacobian_fd(self, tau, w)
        out = np.asarray(self.jacobian(tau, w), dtype=float)
        if out.shape != (self.dim_state, self.dim_state):
            raise ValueError(f"jacobian returned shape {out.shape}")
        return out


def jacobian_fd(system, tau, w, h_rel=1e-6):
    """Central-difference Jacobian ``df_i/dw_j`` with step ``h_rel*|w_j|`` (floor 1e-8)."""
    if h_rel <= 0:
        raise ValueError("h_rel must be positive")
    w = np.asarray(w, dtype=float)
    d = system.dim_state
    jac = np.empty((d, d))
    for j in range(d):
        h = max(h_rel * abs(w[j]), 1e-8)
        wp = w.copy()
        wm = w.copy()
        wp[j] += h
        wm[j] -= h
        jac[:, j] = (system.f(tau, wp) - system.f(tau, wm)) / (2.0 * h)
    return jac


@dataclass(frozen=True, eq=False)
class OdeTrajectory:
    grid: np.ndarray
    states: np.ndarray
    jacobians: np.ndarray

    @property
    def t0(self):
        return float(self.grid[0])

    @property
    def t_end(self):
        return float(self.grid[-1])

    @property
    def dt(self):
        return (self.t_end - self.t0) / (len(self.grid) - 1)

    def index(self, t, strict=False):
        """Nearest grid node to ``t``; with ``strict`` the time must sit on a node."""
        if t < self.t0 - 1e-9 * max(1.0, abs(self.t0)) or t > self.t_end + 1e-9 * max(1.0, abs(self.t_end)):
            raise ValueError(f"time {t} outside trajectory [{self.t0}, {self.t_end}]")
        k = int(round((t - self.t0) / self.dt))
        k = min(max(k, 0), len(self.grid) - 1)
        if strict and abs(self.grid[k] - t) > 1e-9 * max(1.0, abs(t)) + 1e-6 * self.dt:
            raise ValueError(f"time {t} is not on the trajectory grid (nearest node {self.grid[k]})")
        return k

    def state_at(self, t):
        return self.states[self.index(t, strict=True)]

    @cached_property
    def step_exponentials(self):
        # exp of the node-averaged Jacobian over each step: second order in dt
        gen = 0.5 * (self.jacobians[:-1] + self.jacobians[1:]) * self.dt
        if gen.shape[-1] == 1:
            return np.exp(gen)
        return expm(gen)


def solve_ode(system, w0, t0, t_end, steps):
    """Integrate ``dw/dtau = f`` with classical RK4 on a uniform grid."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not t_end > t0:
        raise ValueError("t_end must exceed t0")
    w = np.array(w0, dtype=float).reshape(system.dim_state)
    grid = np.linspace(t0, t_end, steps + 1)
    dt = (t_end - t0) / steps
    states = np.empty((steps + 1, system.dim_state))
    states[0] = w
    f = system.f
    for k in range(steps):
        tk = grid[k]
        k1 = f(tk, w)
        k2 = f(tk + dt / 2, w + dt / 2 * k1)
        k3 = f(tk + dt / 2, w + dt / 2 * k2)
        k4 = f(tk + dt, w + dt * k3)
        w = w + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(w)):
            raise DivergenceError(f"ODE state became non-finite at tau={grid[k + 1]:g}")
        states[k + 1] = w
    jacs = np.stack([system.J(tau, s) for tau, s in zip(grid, states)])
    return OdeTrajectory(grid=grid, states=states, jacobians=jacs)


def propagator(traj, tau_from, tau_to):
    """Time-ordered exponential ``U(tau_to, tau_from)``, latest factor leftmost."""
    if tau_from > tau_to:
        raise ValueError("propagator needs tau_from <= tau_to")
    i = traj.index(tau_from)
    j = traj.index(tau_to)
    d = traj.states.shape[1]
    U = np.eye(d)
    steps = traj.step_exponentials
    for k in range(i, j):
        U = steps[k] @ U
    return U


@dataclass(frozen=True, eq=False)
class FluctuationCovariance:
    t: float
    cov_z: np.ndarray
    learning_rate: float

    @property
    def cov_w(self):
        return self.learning_rate * self.cov_z


def covariance_path(system, traj):
    """``cov_z`` at every grid node (composite trapezoid in time).

    Uses the recursion A_{k+1} = E_k A_k E_k^T + Q_{k+1} for the full-weight sum
    and removes half of the two endpoint terms.
    """
    grid = traj.grid
    d = system.dim_state
    Q = np.empty((len(grid), d, d))
    for k, (tau, w) in enumerate(zip(grid, traj.states)):
        G = system.G(tau, w)
        Q[k] = G @ G.T
    E = traj.step_exponentials
    out = np.zeros((len(grid), d, d))
    A = Q[0].copy()
    B = Q[0].copy()
    dt = traj.dt
    for k in range(len(grid) - 1):
        A = E[k] @ A @ E[k].T + Q[k + 1]
        B = E[k] @ B @ E[k].T
        M = dt * (A - 0.5 * B - 0.5 * Q[k + 1])
        out[k + 1] = 0.5 * (M + M.T)
    return out


def fluctuation_covariance(system, traj, t, gamma):
    """Covariance of the rescaled fluctuation ``z(t) = (w(t) - w_ode(t))/sqrt(gamma)``."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    k = traj.index(t, strict=True)
    d = system.dim_state
    if k == 0:
        return FluctuationCovariance(float(traj.grid[0]), np.zeros((d, d)), float(gamma))
    sub = OdeTrajectory(traj.grid[: k + 1], traj.states[: k + 1], traj.jacobians[: k + 1])
    if "step_exponentials" in traj.__dict__:
        sub.__dict__["step_exponentials"] = traj.step_exponentials[:k]
    cov = covariance_path(system, sub)[-1]
    return FluctuationCovariance(float(traj.grid[k]), cov, float(gamma))


def transition_density(w, t, traj, cov, rel_tol=1e-12):
    """Gaussian density of ``w`` at time ``t`` restricted to the covariance support.

    Points off the support subspace get density 0.
    """
    if cov.learning_rate <= 0:
        raise ValueError("transition density needs gamma > 0")
    if abs(cov.t - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError("covariance was computed at a different time")
    mean = traj.state_at(t)
    dev = np.asarray(w, dtype=float).reshape(mean.shape) - mean
    C = cov.cov_w
    C = 0.5 * (C + C.T)
    evals, evecs = np.linalg.eigh(C)
    lam_max = evals.max() if evals.size else 0.0
    scale = max(float(np.linalg.norm(dev)), 1.0)
    if lam_max <= 0:
        if np.linalg.norm(dev) <= 1e-12 * scale:
            return math.inf
        raise DegenerateDensityError("covariance vanishes and w differs from the deterministic flow")
    keep = evals > rel_tol * lam_max
    V = evecs[:, keep]
    lam = evals[keep]
    coords = V.T @ dev
    off = dev - V @ coords
    if np.linalg.norm(off) > 1e-8 * max(math.sqrt(lam_max), float(np.linalg.norm(dev))):
        return 0.0
    k = lam.size
    quad = float(np.sum(coords**2 / lam))
    log_pdet = float(np.sum(np.log(lam)))
    return math.exp(-0.5 * quad - 0.5 * (k * math.log(2 * math.pi) + log_pdet))


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Euler-Maruyama paths; ``paths[r, i]`` is the state at ``times[i]``."""

    dt: float
    steps: int
    replicates: int
    t0: float
    times: np.ndarray
    paths: np.ndarray
    seed: int
    seed_scheme: str = "SeedSequence(seed, spawn_key=(replicate,))"

    def index(self, t):
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)) + 1e-6 * self.dt:
            raise ValueError(f"time {t} was not recorded (nearest {self.times[i]})")
        return i


def _improved(system, tau, w, gamma):
    # -grad(Phi + gamma/4 |grad Phi|^2) = f - (gamma/2) J f   when f = -grad(Phi)
    f = system.f(tau, w)
    return f - 0.5 * gamma * (system.J(tau, w) @ f)


def _batch_drift(system, tau, W, gamma, improved):
    if system.vectorized:
        F = np.asarray(system.drift(tau, W), dtype=float)
        if improved:
            if system.jacobian is None:
                J = np.stack([jacobian_fd(system, tau, w) for w in W])
            else:
                J = np.asarray(system.jacobian(tau, W), dtype=float)
                if J.ndim == 2:
                    J = np.broadcast_to(J, (W.shape[0],) + J.shape)
            F = F - 0.5 * gamma * np.einsum("rij,rj->ri", J, F)
        return F
    if improved:
        return np.stack([_improved(system, tau, w, gamma) for w in W])
    return np.stack([system.f(tau, w) for w in W])


def _batch_diffusion(system, tau, W):
    if system.vectorized:
        G = np.asarray(system.diffusion(tau, W), dtype=float)
        if G.ndim == 2:
            G = np.broadcast_to(G, (W.shape[0],) + G.shape)
        return G
    return np.stack([system.G(tau, w) for w in W])


def _chunk_size(R, steps, n):
    # fixed by problem shape only, so chunking never depends on the worker count
    return int(max(1, min(R, 2_000_000 // max(1, steps * n))))


def _simulate_chunk(system, w0, t0, gamma, dt, steps, record_idx, seed, start, stop, improved):
    m = stop - start
    d, n = system.dim_state, system.dim_noise
    noise = np.empty((m, steps, n))
    for i in range(m):
        noise[i] = replicate_rng(seed, start + i).standard_normal((steps, n))
    noise *= math.sqrt(dt)
    W = np.tile(np.asarray(w0, dtype=float).reshape(1, d), (m, 1))
    out = np.empty((m, len(record_idx), d))
    slot = 0
    if record_idx[0] == 0:
        out[:, 0] = W
        slot = 1
    sg = math.sqrt(gamma)
    for k in range(steps):
        tau = t0 + k * dt
        F = _batch_drift(system, tau, W, gamma, improved)
        if gamma > 0:
            G = _batch_diffusion(system, tau, W)
            W = W + F * dt + sg * np.einsum("rdn,rn->rd", G, noise[:, k])
        else:
            W = W + F * dt
        if not np.all(np.isfinite(W)):
            bad = int(np.argmax(~np.all(np.isfinite(W), axis=1)))
            raise DivergenceError(f"replicate {start + bad} diverged at step {k + 1}")
        while slot < len(record_idx) and record_idx[slot] == k + 1:
            out[:, slot] = W
            slot += 1
    return out


def sample_paths(system, w0, gamma, dt, steps, replicates, seed, improved_drift=False,
                 record_every=1, t0=0.0, workers=1, record_at=None):
    """Euler-Maruyama ensemble ``w_{k+1} = w_k + f dt + sqrt(gamma) G deta_k``.

    Replicate ``r`` draws its increments from its own counter-derived stream,
    so the ensemble is identical for any ``workers``.  States are stored every
    ``record_every`` steps, or only at the step indices ``record_at``.
    """
    if dt <= 0 or gamma < 0 or replicates < 1 or steps < 1:
        raise ValueError("need dt > 0, gamma >= 0, steps >= 1, replicates >= 1")
    if improved_drift and not system.conservative:
        raise ValueError("improved drift needs a conservative (gradient) drift")
    if record_at is not None:
        record_idx = np.unique(np.asarray(record_at, dtype=np.int64))
        if record_idx.size == 0 or record_idx[0] < 0 or record_idx[-1] > steps:
            raise ValueError("record_at must hold step indices in [0, steps]")
    else:
        record_idx = np.arange(0, steps + 1, record_every)
    if record_at is None and record_idx[-1] != steps:
        record_idx = np.append(record_idx, steps)
    size = _chunk_size(replicates, steps, system.dim_noise)
    bounds = [(s, min(s + size, replicates)) for s in range(0, replicates, size)]

    def job(b):
        return _simulate_chunk(system, w0, t0, gamma, dt, steps, record_idx, seed, b[0], b[1], improved_drift)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, bounds))
    else:
        parts = [job(b) for b in bounds]
    paths = np.concatenate(parts, axis=0)
    return PathEnsemble(dt=float(dt), steps=int(steps), replicates=int(replicates), t0=float(t0),
                        times=t0 + record_idx * dt, paths=paths, seed=int(seed))


@dataclass(frozen=True)
class FluctuationStats:
    mean_dev: np.ndarray
    sample_cov: np.ndarray
    mean_se: np.ndarray
    cov_se: np.ndarray
    replicates: int


def empirical_fluctuation_stats(ensemble, traj, gamma, t):
    """Mean and covariance (with standard errors) of ``z = (w(t) - w_ode(t))/sqrt(gamma)``."""
    R = ensemble.replicates
    if R < 2:
        raise InsufficientReplicatesError("need at least 2 replicates")
    d = ensemble.paths.shape[2]
    if abs(ensemble.t0 - traj.t0) > 1e-12 * max(1.0, abs(traj.t0)):
        raise ValueError("ensemble and trajectory start at different times")
    W = ensemble.paths[:, ensemble.index(t)]
    if gamma == 0:
        z = np.zeros((d, d))
        return FluctuationStats(np.zeros(d), z, np.zeros(d), z.copy(), R)
    Z = (W - traj.state_at(t)) / math.sqrt(gamma)
    mean = Z.mean(axis=0)
    C = Z - mean
    prods = C[:, :, None] * C[:, None, :]
    cov = prods.sum(axis=0) / (R - 1)
    cov_se = prods.std(axis=0, ddof=1) / math.sqrt(R)
    mean_se = Z.std(axis=0, ddof=1) / math.sqrt(R)
    return FluctuationStats(mean, cov, mean_se, cov_se, R)


@dataclass(frozen=True)
class LinearSde1d:
    """``dw = h(tau)(y - w) dtau + sqrt(gamma) sigma(tau) deta`` (exactly solvable)."""

    h: Callable[[float], float]
    sigma: Callable[[float], float]
    y: float = 1.0
    w0: float = 0.0
    t0: float = 0.0
    gamma: float = 0.01

    def as_system(self):
        h, sig, y = self.h, self.sigma, self.y

        def drift(tau, w):
            return h(tau) * (y - np.asarray(w, dtype=float))

        def diffusion(tau, w):
            w = np.asarray(w, dtype=float)
            return np.full(w.shape + (1,), sig(tau))

        def jac(tau, w):
            w = np.asarray(w, dtype=float)
            return np.full(w.shape + (1,), -h(tau))

        return SdeSystem(1, 1, drift, diffusion, jac, conservative=True, vectorized=True)


def _int_h(sde, a, b):
    if b <= a:
        return 0.0
    return integrate.quad(sde.h, a, b, epsabs=1e-13, epsrel=1e-12, limit=200)[0]


def linear_sde_exact(sde, t):
    """Exact (mean, variance) of :class:`LinearSde1d` at time ``t``."""
    if t < sde.t0:
        raise ValueError("t must be >= t0")
    if t == sde.t0:
        return float(sde.w0), 0.0
    mean = sde.y + (sde.w0 - sde.y) * math.exp(-_int_h(sde, sde.t0, t))

    def integrand(u):
        return sde.sigma(u) ** 2 * math.exp(-2.0 * _int_h(sde, u, t))

    var = integrate.quad(integrand, sde.t0, t, epsabs=1e-10, epsrel=1e-10, limit=200)[0]
    return mean, sde.gamma * var


def linear_scenario(name, gamma=0.01, y=1.0, w0=0.0):
    """Named :class:`LinearSde1d` cases: ``constant``, ``pinning``, ``time_varying``."""
    if name == "constant":
        return LinearSde1d(lambda s: 1.0, lambda s: 1.0, y=y, w0=w0, gamma=gamma)
    if name == "pinning":
        return LinearSde1d(lambda s: 1.0, lambda s: math.exp(-s), y=y, w0=w0, gamma=gamma)
    if name == "time_varying":
        return LinearSde1d(lambda s: 1.0 + s / 2.0, lambda s: 1.0 / (1.0 + s), y=y, w0=w0, gamma=gamma)
    raise ValueError(f"unknown scenario {name!r}")
