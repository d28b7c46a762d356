"""Pure-Python (numpy) versions of the compiled kernels in ``_kernels.pyx``.

Same signatures and semantics; used when the extension is not built or when
``SGFRISK_PURE_PYTHON`` is set.
"""
import math

import numpy as np


def _record(out, rec, record_at, v, beta, target):
    ok = True
    while rec < len(record_at) and record_at[rec] == v:
        diff = target - beta
        out[rec] = diff @ diff
        ok = ok and math.isfinite(out[rec])
        rec += 1
    return rec, ok


def sgd_path(X, y, beta, idx, gamma, record_at, target):
    iters, batch = idx.shape
    out = np.full(len(record_at), np.nan)
    rec = 0
    scale = gamma / batch
    for v in range(iters + 1):
        rec, ok = _record(out, rec, record_at, v, beta, target)
        if v == iters or rec >= len(record_at) or not ok:
            break
        rows = idx[v]
        if batch == 1:
            k = rows[0]
            xk = X[k]
            beta += (scale * (y[k] - xk @ beta)) * xk
        else:
            Xb = X[rows]
            beta += scale * (Xb.T @ (y[rows] - Xb @ beta))
    return out


def gd_path(X, y, beta, iters, gamma, record_at, target):
    out = np.full(len(record_at), np.nan)
    rec = 0
    scale = gamma / X.shape[0]
    for v in range(iters + 1):
        rec, ok = _record(out, rec, record_at, v, beta, target)
        if v == iters or rec >= len(record_at) or not ok:
            break
        beta += scale * (X.T @ (y - X @ beta))
    return out
