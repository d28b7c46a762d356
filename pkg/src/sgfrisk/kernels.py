"""Backend selection for the hot SGD/GD loops.

The compiled extension is used when importable; setting the environment
variable ``SGFRISK_PURE_PYTHON=1`` forces the numpy fallback.
"""
import importlib
import os

import numpy as np


def load_backend(name):
    """Return the kernel module for ``"cython"`` or ``"python"``."""
    if name == "cython":
        return importlib.import_module("sgfrisk._kernels")
    if name == "python":
        return importlib.import_module("sgfrisk._kernels_py")
    raise ValueError(f"unknown kernel backend {name!r}")


def _select():
    if os.environ.get("SGFRISK_PURE_PYTHON", "") not in ("", "0"):
        return "python", load_backend("python")
    try:
        return "cython", load_backend("cython")
    except ImportError:
        return "python", load_backend("python")


BACKEND, _impl = _select()


def available_backends():
    names = ["python"]
    try:
        load_backend("cython")
        names.insert(0, "cython")
    except ImportError:
        pass
    return names


def _prep(X, y, beta, record_at, target):
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    beta = np.array(beta, dtype=np.float64, copy=True)
    record_at = np.ascontiguousarray(record_at, dtype=np.int64)
    target = np.ascontiguousarray(target, dtype=np.float64)
    if record_at.size and np.any(np.diff(record_at) < 0):
        raise ValueError("record_at must be sorted")
    return X, y, beta, record_at, target


def sgd_path(X, y, beta, idx, gamma, record_at, target, backend=None):
    """Run (mini-batch) SGD on ``(1/2n)||y - X b||^2`` using the sample indices
    ``idx`` (shape ``(iters, batch)``); return ``||target - b||^2`` at ``record_at``."""
    impl = _impl if backend is None else load_backend(backend)
    X, y, beta, record_at, target = _prep(X, y, beta, record_at, target)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if idx.ndim == 1:
        idx = idx[:, None]
    return impl.sgd_path(X, y, beta, idx, float(gamma), record_at, target)


def gd_path(X, y, beta, iters, gamma, record_at, target, backend=None):
    """Literal full-batch GD loop; same recording contract as :func:`sgd_path`."""
    impl = _impl if backend is None else load_backend(backend)
    X, y, beta, record_at, target = _prep(X, y, beta, record_at, target)
    return impl.gd_path(X, y, beta, int(iters), float(gamma), record_at, target)
