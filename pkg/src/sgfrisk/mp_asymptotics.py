"""Large-system limits (p/n -> alpha, d/n -> psi) of the weak-features risks.

Integrals against the Marchenko-Pastur density use Gauss-Legendre in the
angle ``theta`` of ``sigma = a_- + (a_+ - a_-)(1 + cos theta)/2``; the
Jacobian ``sin theta`` cancels the square-root edges of the density.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "AsymptoticParams",
    "MpMeasure",
    "ThresholdDivergenceError",
    "QuadratureResult",
    "mp_density",
    "mp_nodes",
    "mp_integral",
    "inverse_moment_closed_form",
    "kernel_K",
    "f1",
    "f2",
    "f2_asymmetric",
    "f1_f2",
    "gf_risk_asymptotic",
    "sgf_correction_asymptotic",
    "train_error_asymptotic",
    "gf_risk_limit",
    "sgf_correction_limit",
    "risk_curve_asymptotic",
]

DEFAULT_NODES = 400
MAX_NODES = 400 * 2**6


class ThresholdDivergenceError(ArithmeticError):
    """The infinite-time GF risk diverges at alpha = 1."""


@dataclass(frozen=True)
class AsymptoticParams:
    alpha: float
    psi: float
    mu: float = 0.5
    gamma_prime: float = 1.0
    norm_beta_sq: float = 1.0
    delta_sq: float = 2.0

    def __post_init__(self):
        vals = (self.alpha, self.psi, self.mu, self.gamma_prime, self.norm_beta_sq, self.delta_sq)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("all parameters must be finite")
        if self.alpha <= 0 or self.psi <= 0:
            raise ValueError("alpha and psi must be positive")
        if self.alpha > self.psi * (1 + 1e-12):
            raise ValueError(f"alpha={self.alpha} exceeds psi={self.psi} (need p <= d)")
        if self.mu < 0 or self.gamma_prime < 0 or self.norm_beta_sq < 0 or self.delta_sq < 0:
            raise ValueError("mu, gamma_prime, norm_beta_sq, delta_sq must be nonnegative")

    @property
    def noise_weight(self):
        return (1.0 - self.alpha / self.psi) * self.norm_beta_sq + self.mu**2

    def replace(self, **kw):
        d = dict(self.__dict__)
        d.update(kw)
        return AsymptoticParams(**d)


@dataclass(frozen=True)
class MpMeasure:
    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    @property
    def lower(self):
        return (1.0 - math.sqrt(self.alpha)) ** 2

    @property
    def upper(self):
        return (1.0 + math.sqrt(self.alpha)) ** 2

    @property
    def atom(self):
        return max(0.0, 1.0 - 1.0 / self.alpha)

    @property
    def mass(self):
        return min(1.0, 1.0 / self.alpha)

    def density(self, sigma):
        return mp_density(self.alpha, sigma)


def mp_density(alpha, sigma):
    """Absolutely continuous part of the Marchenko-Pastur law with ratio ``alpha``."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    sigma = np.asarray(sigma, dtype=float)
    lo, hi = (1 - math.sqrt(alpha)) ** 2, (1 + math.sqrt(alpha)) ** 2
    inside = (sigma > lo) & (sigma < hi) & (sigma > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        val = np.sqrt(np.clip((hi - sigma) * (sigma - lo), 0, None)) / (2 * math.pi * alpha * sigma)
    out = np.where(inside, val, 0.0)
    return float(out) if out.ndim == 0 else out


@lru_cache(maxsize=32)
def _nodes(alpha, m):
    x, w = np.polynomial.legendre.leggauss(m)
    theta = 0.5 * math.pi * (x + 1.0)
    wt = 0.5 * math.pi * w
    lo, hi = (1 - math.sqrt(alpha)) ** 2, (1 + math.sqrt(alpha)) ** 2
    half = 0.5 * (hi - lo)
    sigma = lo + half * (1.0 + np.cos(theta))
    # rho(sigma) dsigma = half^2 sin^2(theta) / (2 pi alpha sigma) dtheta
    weights = wt * half**2 * np.sin(theta) ** 2 / (2 * math.pi * alpha * sigma)
    sigma.setflags(write=False)
    weights.setflags(write=False)
    return sigma, weights


def mp_nodes(alpha, quad_nodes=DEFAULT_NODES):
    """Nodes ``sigma_j`` and weights ``w_j`` with ``sum w_j phi(sigma_j) ~ int phi d rho_alpha``."""
    if quad_nodes < 16:
        raise ValueError("quad_nodes must be >= 16")
    return _nodes(float(alpha), int(quad_nodes))


@dataclass(frozen=True)
class QuadratureResult:
    value: float
    nodes: int
    converged: bool


def _eval(phi, sigma):
    vals = np.asarray(phi(sigma), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError("integrand is not finite on the support")
    return vals


def mp_integral(alpha, phi, quad_nodes=DEFAULT_NODES, tol=1e-9, adaptive=True, full_output=False):
    """``int phi(sigma) rho_alpha(sigma) dsigma`` over the a.c. support.

    ``phi`` must accept an array.  With ``adaptive`` the node count doubles
    until successive values differ by less than ``tol`` (relative above 1).
    """
    sigma, w = mp_nodes(alpha, quad_nodes)
    value = float(w @ _eval(phi, sigma))
    m = quad_nodes
    converged = not adaptive
    while adaptive and m < MAX_NODES:
        m *= 2
        sigma, w = mp_nodes(alpha, m)
        new = float(w @ _eval(phi, sigma))
        done = abs(new - value) <= tol * max(1.0, abs(new))
        value = new
        if done:
            converged = True
            break
    if full_output:
        return QuadratureResult(value, m, converged)
    return value


def inverse_moment_closed_form(alpha):
    """``alpha * int sigma^{-1} rho_alpha``: ``1/(1-alpha) - 1`` below 1, ``1/(alpha-1)`` above."""
    if alpha == 1:
        return math.inf
    return 1.0 / (1.0 - alpha) - 1.0 if alpha < 1 else 1.0 / (alpha - 1.0)


def kernel_K(t, s1, s2, rel=1e-7):
    """``(e^{-2 s1 t} - e^{-2 s2 t}) / (2 (s2 - s1))`` = ``int_0^t e^{-2 s1 tau - 2 s2 (t - tau)} dtau``."""
    t = np.asarray(t, dtype=float)
    s1 = np.asarray(s1, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    lo = np.minimum(s1, s2)
    gap = np.abs(s2 - s1)
    near = gap <= rel * np.maximum(np.maximum(np.abs(s1), np.abs(s2)), 1.0)
    base = np.exp(-2.0 * lo * t)
    with np.errstate(divide="ignore", invalid="ignore"):
        far = base * -np.expm1(-2.0 * gap * t) / (2.0 * np.where(near, 1.0, gap))
    diag = t * base * (1.0 - gap * t)
    out = np.where(near, diag, far)
    return float(out) if out.ndim == 0 else out


def _tensor(alpha, t, weight, quad_nodes):
    s, w = mp_nodes(alpha, quad_nodes)
    K = kernel_K(t, s[:, None], s[None, :])
    return float(w @ (weight(s[:, None], s[None, :]) * K) @ w)


def _converged_tensor(alpha, t, weight, quad_nodes, tol=1e-10):
    if t == 0:
        return 0.0
    value = _tensor(alpha, t, weight, quad_nodes)
    m = quad_nodes
    while m < 1600:
        m *= 2
        new = _tensor(alpha, t, weight, m)
        if abs(new - value) <= tol * max(1.0, abs(new)):
            return new
        value = new
    return value


def _pair(alpha, t, m):
    s, w = mp_nodes(alpha, m)
    K = kernel_K(t, s[:, None], s[None, :])
    ws = w * s
    return float(ws @ K @ ws), float(w @ K @ ws)


def f1_f2(alpha, t, quad_nodes=DEFAULT_NODES, tol=1e-10):
    """``(F1, F2)`` from one shared kernel table (F2 in its asymmetric form)."""
    if t == 0:
        return 0.0, 0.0
    value = _pair(alpha, t, quad_nodes)
    m = quad_nodes
    while m < 1600:
        m *= 2
        new = _pair(alpha, t, m)
        if all(abs(a - b) <= tol * max(1.0, abs(a)) for a, b in zip(new, value)):
            return new
        value = new
    return value


def f1(alpha, t, quad_nodes=DEFAULT_NODES):
    """``int int s1 s2 K(t, s1, s2) rho(ds1) rho(ds2)``."""
    return _converged_tensor(alpha, t, lambda a, b: a * b, quad_nodes)


def f2(alpha, t, quad_nodes=DEFAULT_NODES):
    """``int int (s1 + s2)/2 K(t, s1, s2) rho(ds1) rho(ds2)``."""
    return _converged_tensor(alpha, t, lambda a, b: 0.5 * (a + b), quad_nodes)


def f2_asymmetric(alpha, t, quad_nodes=DEFAULT_NODES):
    """``int int s2 K(t, s1, s2) rho(ds1) rho(ds2)`` (equal to :func:`f2` by symmetry of K)."""
    return _converged_tensor(alpha, t, lambda a, b: b + 0.0 * a, quad_nodes)


def _check_t(t):
    if t < 0:
        raise ValueError("t must be nonnegative")


def gf_risk_asymptotic(params, t, quad_nodes=DEFAULT_NODES):
    _check_t(t)
    a, psi = params.alpha, params.psi
    decay = mp_integral(a, lambda s: np.exp(-2.0 * s * t), quad_nodes)
    inv = mp_integral(a, lambda s: np.expm1(-s * t) ** 2 / s, quad_nodes)
    return 0.5 * (params.delta_sq / psi * (max(0.0, a - 1.0) + a * decay)
                  + params.noise_weight * (1.0 + a * inv))


def sgf_correction_asymptotic(params, t, quad_nodes=DEFAULT_NODES):
    _check_t(t)
    if t == 0 or params.gamma_prime == 0:
        return 0.0
    a, psi = params.alpha, params.psi
    tail = 0.0
    if a < 1:
        tail = (1.0 - a) * mp_integral(a, lambda s: -0.5 * np.expm1(-2.0 * s * t), quad_nodes)
    F1, F2 = f1_f2(a, t, quad_nodes)
    inner = a / psi * params.delta_sq * F1 + params.noise_weight * (a * F2 + tail)
    return 0.5 * params.gamma_prime * a / psi * inner


def train_error_asymptotic(params, t, quad_nodes=DEFAULT_NODES):
    """Large-system limit of the expected GF train error."""
    _check_t(t)
    a, psi = params.alpha, params.psi
    first = mp_integral(a, lambda s: s * np.exp(-2.0 * s * t), quad_nodes)
    second = mp_integral(a, lambda s: np.exp(-2.0 * s * t), quad_nodes)
    return 0.5 * (params.delta_sq * a / psi * first
                  + params.noise_weight * (a * second + max(0.0, 1.0 - a)))


def gf_risk_limit(params):
    a = params.alpha
    if a == 1:
        raise ThresholdDivergenceError("infinite-time GF risk diverges at alpha = 1")
    return 0.5 * (params.delta_sq / params.psi * max(0.0, a - 1.0)
                  + params.noise_weight / (1.0 - min(a, 1.0 / a)))


def sgf_correction_limit(params):
    a = params.alpha
    return 0.25 * params.gamma_prime * a / params.psi * params.noise_weight * max(0.0, 1.0 - a)


def risk_curve_asymptotic(params, times, quad_nodes=DEFAULT_NODES):
    """Large-system GF risk, SGF correction and train error along ``times``."""
    from .weak_features import RiskCurve

    times = np.asarray(times, dtype=float)
    gf = [gf_risk_asymptotic(params, t, quad_nodes) for t in times]
    sgf = [sgf_correction_asymptotic(params, t, quad_nodes) for t in times]
    train = np.array([train_error_asymptotic(params, t, quad_nodes) for t in times])
    return RiskCurve.build(times, gf, sgf, "asymptotic MP", train_error=train)
