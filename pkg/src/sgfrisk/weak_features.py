"""Weak-features linear regression under GF / SGF / SGD.

Data: ``x ~ N(0, I_d)``, ``y = beta^T x + mu*eps``; only the coordinates in a
random subset ``A`` (``|A| = p``) are learned with the loss
``L = ||y - X_A b||^2 / (2n)``.  Everything instance-level is computed in the
SVD basis of ``X_A``; finite-size expectations average over fresh Gaussian
spectra.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.linalg import eigvalsh_tridiagonal

from . import kernels
from .quadrature import time_rule
from .sde_core import DivergenceError, InsufficientReplicatesError, SdeSystem, replicate_rng

__all__ = [
    "ModelParams",
    "WeakFeaturesInstance",
    "RiskTrajectory",
    "RiskCurve",
    "DifferenceCurve",
    "unit_sphere",
    "generate_instance",
    "gf_estimator",
    "diffusion_matrix",
    "exact_noise_covariance",
    "risk_given_estimator",
    "instance_covariance_trace",
    "sgf_system",
    "sample_spectra",
    "expected_gf_risk_finite",
    "expected_sgf_correction_finite",
    "expected_train_error_finite",
    "sgd_run",
    "sgd_minus_gd_expectation",
    "gd_risk_expectation",
    "risk_curve_finite",
]


def unit_sphere(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class ModelParams:
    """Sizes, noise and learning rate of the weak-features model.

    ``gamma`` defaults to ``gamma_prime / d``.  ``beta``/``beta0`` may be given
    explicitly; otherwise they are drawn uniformly on the sphere (``beta``
    rescaled to ``norm_beta``).  ``delta_sq`` overrides the value of
    ``||beta - beta0||^2`` used by the finite-size formulas when no vectors are
    supplied (default ``norm_beta**2 + 1``, its expectation).
    """

    n: int
    d: int
    p: int
    mu: float = 0.5
    gamma: Optional[float] = None
    gamma_prime: float = 1.0
    norm_beta: float = 1.0
    beta: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    beta0: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    delta_sq: Optional[float] = None
    batch_size: int = 1

    def __post_init__(self):
        if self.n < 1 or self.d < 1 or not 1 <= self.p <= self.d:
            raise ValueError(f"need n >= 1 and 1 <= p <= d (got n={self.n}, d={self.d}, p={self.p})")
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")
        if self.gamma is None:
            object.__setattr__(self, "gamma", self.gamma_prime / self.d)
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("beta", "beta0"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=float)
                if v.shape != (self.d,):
                    raise ValueError(f"{name} must have shape ({self.d},)")
                object.__setattr__(self, name, v)
        if self.beta is not None:
            object.__setattr__(self, "norm_beta", float(np.linalg.norm(self.beta)))

    def draw_vectors(self, rng):
        beta = self.beta if self.beta is not None else self.norm_beta * unit_sphere(rng, self.d)
        beta0 = self.beta0 if self.beta0 is not None else unit_sphere(rng, self.d)
        return beta, beta0

    def with_vectors(self, beta, beta0):
        return ModelParams(self.n, self.d, self.p, self.mu, self.gamma, self.gamma_prime,
                           float(np.linalg.norm(beta)), beta, beta0, None, self.batch_size)

    def with_p(self, p):
        return ModelParams(self.n, self.d, p, self.mu, self.gamma, self.gamma_prime,
                           self.norm_beta, self.beta, self.beta0, self.delta_sq, self.batch_size)

    @property
    def norm_beta_sq(self):
        return self.norm_beta**2

    @property
    def delta_sq_value(self):
        if self.beta is not None and self.beta0 is not None:
            return float(np.sum((self.beta - self.beta0) ** 2))
        if self.delta_sq is not None:
            return float(self.delta_sq)
        return self.norm_beta_sq + 1.0

    @property
    def noise_weight(self):
        """``(1 - p/d)||beta||^2 + mu^2``: the part of the risk no feature in A can explain."""
        return (1.0 - self.p / self.d) * self.norm_beta_sq + self.mu**2


@dataclass(frozen=True, eq=False)
class WeakFeaturesInstance:
    X: np.ndarray
    y: np.ndarray
    subset: np.ndarray
    eps: np.ndarray
    beta: np.ndarray
    beta0: np.ndarray
    mu: float

    @classmethod
    def from_arrays(cls, X, beta, subset, mu=0.0, eps=None, beta0=None):
        X = np.asarray(X, dtype=float)
        n, d = X.shape
        beta = np.asarray(beta, dtype=float)
        subset = np.sort(np.asarray(subset, dtype=np.int64))
        if len(np.unique(subset)) != len(subset) or subset.min() < 0 or subset.max() >= d:
            raise ValueError("subset must hold distinct indices in [0, d)")
        eps = np.zeros(n) if eps is None else np.asarray(eps, dtype=float)
        beta0 = np.zeros(d) if beta0 is None else np.asarray(beta0, dtype=float)
        y = X @ beta + mu * eps
        return cls(X, y, subset, eps, beta, beta0, float(mu))

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    @property
    def p(self):
        return len(self.subset)

    @cached_property
    def XA(self):
        return np.ascontiguousarray(self.X[:, self.subset])

    @cached_property
    def complement(self):
        mask = np.ones(self.d, dtype=bool)
        mask[self.subset] = False
        return np.flatnonzero(mask)

    @cached_property
    def svd(self):
        """``(U, s, V)`` with full orthogonal ``U`` (n x n), ``V`` (p x p)."""
        U, s, Vt = np.linalg.svd(self.XA, full_matrices=True)
        return U, s, Vt.T

    @cached_property
    def rank(self):
        s = self.svd[1]
        if s.size == 0 or s[0] == 0:
            return 0
        tol = max(self.XA.shape) * np.finfo(float).eps * s[0]
        return int(np.sum(s > tol))

    @property
    def spectrum(self):
        """Nonzero eigenvalues ``lambda_i^2 / n`` of ``X_A^T X_A / n``."""
        return self.svd[1][: self.rank] ** 2 / self.n

    @property
    def beta_A(self):
        return self.beta[self.subset]

    @property
    def beta0_A(self):
        return self.beta0[self.subset]

    @cached_property
    def _uy(self):
        return self.svd[0].T @ self.y


def generate_instance(params, seed):
    """Draw ``(X, eps, A)`` (and ``beta``, ``beta0`` unless fixed in ``params``)."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((params.n, params.d))
    eps = rng.standard_normal(params.n)
    subset = np.sort(rng.choice(params.d, size=params.p, replace=False))
    beta, beta0 = params.draw_vectors(rng)
    return WeakFeaturesInstance.from_arrays(X, beta, subset, params.mu, eps, beta0)


def _coords_at(inst, b0_A, t):
    """SVD coordinates ``V^T b(t)`` of the GF trajectory for an array of times."""
    U, s, V = inst.svd
    r = inst.rank
    t = np.atleast_1d(np.asarray(t, dtype=float))
    c0 = V.T @ np.asarray(b0_A, dtype=float)
    out = np.repeat(c0[None, :], len(t), axis=0)
    if r:
        target = inst._uy[:r] / s[:r]
        decay = np.exp(-np.outer(t, s[:r] ** 2) / inst.n)
        out[:, :r] = target + (c0[:r] - target) * decay
    return out


def gf_estimator(inst, beta0_A, t):
    """Exact gradient-flow estimator ``b_A(t)`` (null directions keep their start value)."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be nonnegative")
    V = inst.svd[2]
    coords = _coords_at(inst, beta0_A, t)
    out = coords @ V.T
    return out[0] if np.ndim(t) == 0 else out


def _residual_sq(inst, beta0_A, t):
    """``||y - X_A b(t)||^2`` along the GF trajectory, vectorised in ``t``."""
    s = inst.svd[1]
    r = inst.rank
    coords = _coords_at(inst, beta0_A, t)
    uy = inst._uy
    fit = uy[:r] - s[:r] * coords[:, :r]
    return np.sum(fit**2, axis=1) + np.sum(uy[r:] ** 2)


def diffusion_matrix(inst, beta_A):
    """SGD noise covariance with per-sample losses replaced by their mean:
    ``(1/n^2) ||y - X_A b||^2 X_A^T X_A``."""
    XA = inst.XA
    res = inst.y - XA @ np.asarray(beta_A, dtype=float)
    return (res @ res) / inst.n**2 * (XA.T @ XA)


def exact_noise_covariance(inst, beta_A):
    """Covariance of the single-sample gradient noise by enumerating all ``n`` samples."""
    XA = inst.XA
    b = np.asarray(beta_A, dtype=float)
    full = -XA.T @ (inst.y - XA @ b) / inst.n
    xis = np.stack([-(inst.y[k] - XA[k] @ b) * XA[k] - full for k in range(inst.n)])
    return xis.T @ xis / inst.n


def risk_given_estimator(beta, subset, beta_A_hat, mu):
    """Population test risk ``(||beta_A - b||^2 + ||beta_Ac||^2 + mu^2) / 2``."""
    beta = np.asarray(beta, dtype=float)
    mask = np.zeros(beta.shape[0], dtype=bool)
    mask[np.asarray(subset, dtype=np.int64)] = True
    diff = beta[mask] - np.asarray(beta_A_hat, dtype=float)
    return 0.5 * (diff @ diff + beta[~mask] @ beta[~mask] + mu**2)


def instance_covariance_trace(inst, beta0_A, t, quad_panels=64, order=8):
    """``Tr cov_z(t)`` of the SGF fluctuations for one instance.

    ``(1/n^2) int_0^t ||y - X_A b_GF(tau)||^2 * sum_i s_i^2 exp(-2 s_i^2 (t - tau)/n) dtau``
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        return 0.0
    tau, w = time_rule(t, quad_panels, order)
    sig = inst.spectrum
    res2 = _residual_sq(inst, beta0_A, tau)
    kern = np.exp(-2.0 * np.outer(t - tau, sig)) @ (sig * inst.n)
    return float(np.sum(w * res2 * kern)) / inst.n**2


def sgf_system(inst):
    """The weak-features SGF as an :class:`SdeSystem` on ``b_A`` (noise dimension ``n``)."""
    XA = inst.XA
    y = inst.y
    n = inst.n
    H = XA.T @ XA / n

    def drift(tau, b):
        b = np.asarray(b, dtype=float)
        return (y - b @ XA.T) @ XA / n

    def diffusion(tau, b):
        b = np.asarray(b, dtype=float)
        res = np.linalg.norm(y - b @ XA.T, axis=-1)
        return np.multiply.outer(res, XA.T / n)

    def jacobian(tau, b):
        return -H

    return SdeSystem(inst.p, n, drift, diffusion, jacobian, conservative=True, vectorized=True)


# ---------------------------------------------------------------------------
# finite-size expectations over Gaussian spectra


def _spectrum_dense(rng, n, p):
    X = rng.standard_normal((n, p))
    G = X.T @ X if p <= n else X @ X.T
    ev = np.linalg.eigvalsh(G)
    return np.clip(ev[::-1], 0.0, None) / n


def _spectrum_tridiagonal(rng, n, p):
    # bidiagonal chi model with the same eigenvalue law as the Gram matrix
    m, k = (p, n) if p <= n else (n, p)
    diag = np.sqrt(rng.chisquare(k - np.arange(m)))
    sub = np.sqrt(rng.chisquare(m - 1 - np.arange(m - 1))) if m > 1 else np.zeros(0)
    main = diag**2
    main[1:] += sub**2
    off = diag[:-1] * sub
    ev = eigvalsh_tridiagonal(main, off) if m > 1 else main
    return np.clip(ev[::-1], 0.0, None) / n


_SPECTRUM_CACHE = {}


def sample_spectra(n, p, replicates, seed, sampler="dense"):
    """``(R, min(n, p))`` nonzero eigenvalues of ``X_A^T X_A / n`` for Gaussian ``X_A``.

    ``sampler="tridiagonal"`` draws from the same law through the chi-bidiagonal
    model (O(r^2) instead of a dense eigensolve).
    """
    key = (n, p, replicates, seed, sampler)
    hit = _SPECTRUM_CACHE.get(key)
    if hit is not None:
        return hit
    draw = {"dense": _spectrum_dense, "tridiagonal": _spectrum_tridiagonal}.get(sampler)
    if draw is None:
        raise ValueError(f"unknown sampler {sampler!r}")
    out = np.stack([draw(replicate_rng(seed, n, p, i), n, p) for i in range(replicates)])
    out.setflags(write=False)
    if len(_SPECTRUM_CACHE) > 32:
        _SPECTRUM_CACHE.clear()
    _SPECTRUM_CACHE[key] = out
    return out


def _mean_se(samples):
    samples = np.asarray(samples, dtype=float)
    R = samples.shape[0]
    return samples.mean(axis=0), samples.std(axis=0, ddof=1) / math.sqrt(R)


def _check_reps(R):
    if R < 2:
        raise InsufficientReplicatesError("need at least 2 replicates")


def _warn_threshold(spectra):
    if spectra.size and spectra.min() < 1e-10:
        warnings.warn("smallest eigenvalue of X_A^T X_A/n below 1e-10 (interpolation threshold)",
                      RuntimeWarning, stacklevel=3)


def expected_gf_risk_finite(params, t, replicates=100, seed=0, sampler="dense"):
    """Finite-size expected GF test risk and its Monte Carlo standard error."""
    _check_reps(replicates)
    n, d, p = params.n, params.d, params.p
    sig = sample_spectra(n, p, replicates, seed, sampler)
    _warn_threshold(sig)
    t = np.asarray(t, dtype=float)
    tt = np.atleast_1d(t)
    e2 = np.exp(-2.0 * sig[:, None, :] * tt[None, :, None]).sum(axis=2)
    e1 = -np.expm1(-sig[:, None, :] * tt[None, :, None])
    inv = (e1**2 / sig[:, None, :]).sum(axis=2) / n
    per = 0.5 * (params.delta_sq_value / d * (max(0, p - n) + e2) + params.noise_weight * (1.0 + inv))
    mean, se = _mean_se(per)
    return (mean.reshape(t.shape), se.reshape(t.shape)) if t.ndim else (float(mean[0]), float(se[0]))


def _tau_integrals(sig, t, panels, order):
    """Per replicate: the two tau-integrals of trace products in the SGF correction.

    first  = int_0^t Tr{S e^{-2S tau}} Tr{S e^{-2S (t-tau)}} dtau
    second = int_0^t Tr{e^{-2S tau}}   Tr{S e^{-2S (t-tau)}} dtau
    with ``S`` the diagonal of eigenvalues ``sig`` (shape ``(R, r)``).
    """
    tau, w = time_rule(t, panels, order)
    a = np.exp(-2.0 * sig[:, :, None] * tau[None, None, :])
    b = np.exp(-2.0 * sig[:, :, None] * (t - tau)[None, None, :])
    s_a = np.einsum("ri,riq->rq", sig, a)
    s_b = np.einsum("ri,riq->rq", sig, b)
    first = (s_a * s_b) @ w
    second = (a.sum(axis=1) * s_b) @ w
    return first, second


def _sgf_per_replicate(params, sig, t, quad_panels, order):
    n, p = params.n, params.p
    if t == 0:
        return np.zeros(sig.shape[0])
    first, second = _tau_integrals(sig, t, quad_panels, order)
    tail = 0.5 * max(0.0, 1.0 - p / n) * (-np.expm1(-2.0 * sig * t)).sum(axis=1)
    bracket = params.delta_sq_value / params.d * first + params.noise_weight * (second / n + tail)
    return 0.5 * params.gamma * bracket


def expected_sgf_correction_finite(params, t, replicates=100, quad_panels=64, seed=0,
                                   sampler="dense", order=8):
    """``(gamma/2) E Tr cov_z(t)`` for finite ``n, d, p`` with its standard error."""
    _check_reps(replicates)
    sig = sample_spectra(params.n, params.p, replicates, seed, sampler)
    _warn_threshold(sig)
    t = np.asarray(t, dtype=float)
    tt = np.atleast_1d(t)
    if np.any(tt < 0):
        raise ValueError("t must be nonnegative")
    per = np.stack([_sgf_per_replicate(params, sig, float(tk), quad_panels, order) for tk in tt], axis=1)
    mean, se = _mean_se(per)
    return (mean.reshape(t.shape), se.reshape(t.shape)) if t.ndim else (float(mean[0]), float(se[0]))


def expected_train_error_finite(params, t, replicates=100, seed=0, sampler="dense"):
    """Finite-size expected GF train error ``E ||y - X_A b(t)||^2 / (2n)``."""
    _check_reps(replicates)
    n, p = params.n, params.p
    sig = sample_spectra(n, p, replicates, seed, sampler)
    t = np.asarray(t, dtype=float)
    tt = np.atleast_1d(t)
    e2 = np.exp(-2.0 * sig[:, None, :] * tt[None, :, None])
    first = (sig[:, None, :] * e2).sum(axis=2)
    second = e2.sum(axis=2) / n + max(0.0, 1.0 - p / n)
    per = 0.5 * (params.delta_sq_value / params.d * first + params.noise_weight * second)
    mean, se = _mean_se(per)
    return (mean.reshape(t.shape), se.reshape(t.shape)) if t.ndim else (float(mean[0]), float(se[0]))


@dataclass(frozen=True)
class RiskCurve:
    """Per-time GF risk, SGF correction and their sum, with provenance."""

    times: np.ndarray
    gf_risk: np.ndarray
    sgf_correction: np.ndarray
    sgf_risk: np.ndarray
    provenance: str
    gf_se: Optional[np.ndarray] = None
    sgf_se: Optional[np.ndarray] = None
    train_error: Optional[np.ndarray] = None
    replicates: Optional[int] = None
    seed: Optional[int] = None

    @classmethod
    def build(cls, times, gf_risk, sgf_correction, provenance, **kw):
        gf_risk = np.asarray(gf_risk, dtype=float)
        sgf_correction = np.asarray(sgf_correction, dtype=float)
        return cls(np.asarray(times, dtype=float), gf_risk, sgf_correction,
                   gf_risk + sgf_correction, provenance, **kw)


def risk_curve_finite(params, times, replicates=100, seed=0, quad_panels=64, sampler="dense"):
    gf, gf_se = expected_gf_risk_finite(params, np.asarray(times), replicates, seed, sampler)
    sgf, sgf_se = expected_sgf_correction_finite(params, np.asarray(times), replicates, quad_panels,
                                                 seed, sampler)
    train, _ = expected_train_error_finite(params, np.asarray(times), replicates, seed, sampler)
    return RiskCurve.build(times, gf, sgf, "finite-size MC", gf_se=gf_se, sgf_se=sgf_se,
                           train_error=train, replicates=replicates, seed=seed)


# ---------------------------------------------------------------------------
# discrete SGD / GD


@dataclass(frozen=True)
class RiskTrajectory:
    iterations: np.ndarray
    times: np.ndarray
    risks: np.ndarray
    mode: str


def _record_points(iters, record_every=None, record_at=None):
    if record_at is None:
        pts = np.arange(0, iters + 1, record_every or 1, dtype=np.int64)
    else:
        pts = np.unique(np.asarray(record_at, dtype=np.int64))
        if pts.size and (pts[0] < 0 or pts[-1] > iters):
            raise ValueError("record points must lie in [0, iters]")
    return pts


def _gd_closed_form(inst, b0_A, gamma, pts):
    # GD is linear: in the SVD basis coordinate i contracts by (1 - gamma s_i^2/n) per step
    U, s, V = inst.svd
    r = inst.rank
    c0 = V.T @ b0_A
    target = V.T @ inst.beta_A
    base = c0 - target
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.empty(len(pts))
        if r:
            fixed = inst._uy[:r] / s[:r]
            factor = 1.0 - gamma * s[:r] ** 2 / inst.n
            powers = factor[None, :] ** pts[:, None].astype(float)
            moving = fixed + (c0[:r] - fixed) * powers - target[:r]
            out[:] = np.sum(moving**2, axis=1)
        else:
            out[:] = 0.0
        out += np.sum(base[r:] ** 2)
    # no rounding from the basis change at the start, so SGD - GD is exactly 0 there
    diff = b0_A - inst.beta_A
    out[pts == 0] = diff @ diff
    return out


def sgd_run(inst, beta0_A, gamma, iters, mode="sgd", record_every=1, seed=0, batch_size=1,
            record_at=None, gd_method="closed_form", backend=None):
    """Run SGD (uniform single samples, or mini-batches) or full-batch GD.

    Returns the test risk at ``t = v * gamma`` for the recorded iterations.
    ``gd_method="loop"`` iterates GD literally instead of using its exact
    solution in the singular basis.
    """
    if iters < 1 or gamma <= 0:
        raise ValueError("need iters >= 1 and gamma > 0")
    pts = _record_points(iters, record_every, record_at)
    b0 = np.asarray(beta0_A, dtype=float)
    if mode == "sgd":
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, inst.n, size=(iters, batch_size))
        sq = kernels.sgd_path(inst.XA, inst.y, b0, idx, gamma, pts, inst.beta_A, backend=backend)
    elif mode == "gd":
        if gd_method == "closed_form":
            sq = _gd_closed_form(inst, b0, gamma, pts)
        else:
            sq = kernels.gd_path(inst.XA, inst.y, b0, iters, gamma, pts, inst.beta_A, backend=backend)
    else:
        raise ValueError(f"mode must be 'sgd' or 'gd', got {mode!r}")
    if not np.all(np.isfinite(sq)):
        bad = int(pts[np.argmax(~np.isfinite(sq))])
        lam = inst.spectrum.max() if inst.rank else 0.0
        raise DivergenceError(
            f"{mode} iterate non-finite by iteration {bad}; gamma={gamma:g} vs largest "
            f"eigenvalue {lam:g} of X_A^T X_A/n (need gamma well below 2/eigenvalue)"
        )
    rest = inst.beta[inst.complement]
    risks = 0.5 * (sq + rest @ rest + inst.mu**2)
    return RiskTrajectory(pts, pts * gamma, risks, mode)


@dataclass(frozen=True)
class DifferenceCurve:
    """Paired SGD - GD risk differences averaged over subsets."""

    times: np.ndarray
    iterations: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    gd_mean: np.ndarray
    gd_stderr: np.ndarray
    subsets: int
    delta_sq: float
    norm_beta_sq: float
    seed: int


def _paired_task(params, beta, beta0, pts, sgd_seeds, seed, s):
    inst = generate_instance(params.with_vectors(beta, beta0), replicate_rng(seed, 1, s))
    gd = sgd_run(inst, inst.beta0_A, params.gamma, int(pts[-1]), "gd", record_at=pts).risks
    diffs = []
    for j in range(sgd_seeds):
        sgd_seed = replicate_rng(seed, 2, s, j).integers(2**63)
        sgd = sgd_run(inst, inst.beta0_A, params.gamma, int(pts[-1]), "sgd", record_at=pts,
                      seed=sgd_seed, batch_size=params.batch_size).risks
        diffs.append(sgd - gd)
    return np.mean(diffs, axis=0), gd


def sgd_minus_gd_expectation(params, t_grid, subsets, sgd_seeds=1, seed=0, workers=1):
    """Average over fresh instances of the paired risk difference SGD - GD at ``t = v*gamma``.

    ``beta`` and ``beta0`` are drawn once (from ``seed``) unless ``params`` fixes
    them; each subset gets a fresh ``(X, eps, A)``.
    """
    if subsets < 2:
        raise InsufficientReplicatesError("need at least 2 subsets")
    beta, beta0 = params.draw_vectors(replicate_rng(seed, 0))
    pts = np.unique(np.rint(np.asarray(t_grid, dtype=float) / params.gamma).astype(np.int64))
    pts = pts[pts >= 0]
    if pts[-1] < 1:
        raise ValueError("t grid must reach at least one iteration")

    def job(s):
        return _paired_task(params, beta, beta0, pts, sgd_seeds, seed, s)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(job, range(subsets)))
    else:
        out = [job(s) for s in range(subsets)]
    diffs = np.stack([o[0] for o in out])
    gds = np.stack([o[1] for o in out])
    mean, se = _mean_se(diffs)
    gmean, gse = _mean_se(gds)
    return DifferenceCurve(pts * params.gamma, pts, mean, se, gmean, gse, subsets,
                           float(np.sum((beta - beta0) ** 2)), float(beta @ beta), seed)


def gd_risk_expectation(params, t_grid, subsets, seed=0, workers=1):
    """Average GD test risk at ``t = v*gamma`` over fresh instances: ``(t, mean, stderr)``."""
    if subsets < 2:
        raise InsufficientReplicatesError("need at least 2 subsets")
    beta, beta0 = params.draw_vectors(replicate_rng(seed, 0))
    pts = np.unique(np.rint(np.asarray(t_grid, dtype=float) / params.gamma).astype(np.int64))
    pts = pts[pts >= 0]
    iters = max(int(pts[-1]), 1)
    fixed = params.with_vectors(beta, beta0)

    def job(s):
        inst = generate_instance(fixed, replicate_rng(seed, 1, s))
        return sgd_run(inst, inst.beta0_A, params.gamma, iters, "gd", record_at=pts).risks

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = np.stack(list(pool.map(job, range(subsets))))
    else:
        out = np.stack([job(s) for s in range(subsets)])
    mean, se = _mean_se(out)
    return pts * params.gamma, mean, se
