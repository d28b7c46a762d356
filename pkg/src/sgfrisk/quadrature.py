"""Composite Gauss-Legendre rules on [0, t]."""
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=64)
def _gl(order):
    x, w = np.polynomial.legendre.leggauss(order)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def panel_rule(edges, order=8):
    """Nodes and weights of an ``order``-point Gauss-Legendre rule on every panel."""
    edges = np.asarray(edges, dtype=float)
    x, w = _gl(order)
    a = edges[:-1, None]
    b = edges[1:, None]
    half = 0.5 * (b - a)
    nodes = a + half * (x[None, :] + 1.0)
    weights = half * w[None, :]
    return nodes.ravel(), weights.ravel()


def graded_edges(t, panels, h_min=1e-3):
    """Panel edges on [0, t] refined geometrically towards both endpoints.

    The integrands here are sums of decaying exponentials in ``tau`` and in
    ``t - tau``, so boundary layers sit at both ends.
    """
    if panels < 2:
        raise ValueError("need at least 2 panels")
    half = panels // 2
    if t <= half * h_min * 4:
        return np.linspace(0.0, t, panels + 1)
    mid = 0.5 * t
    # first panel [0, h_min], then geometric up to mid
    inner = np.geomspace(h_min, mid, half)
    left = np.concatenate([[0.0], inner])
    right = t - left[::-1]
    return np.concatenate([left, right[1:]]) if panels % 2 == 0 else np.concatenate(
        [left, [0.5 * (mid + right[1])], right[1:]]
    )


def time_rule(t, panels=64, order=8):
    """Nodes/weights for integrating over ``tau`` in [0, t]."""
    if t <= 0:
        return np.zeros(0), np.zeros(0)
    return panel_rule(graded_edges(t, panels), order)
