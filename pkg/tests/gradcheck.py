"""Central finite-difference oracle used by the gradient tests.

Kept deliberately independent of the engine's backward pass: it only calls
forward evaluations of a plain-numpy function.
"""

import numpy as np


def central_diff(fn, arrays, h=1e-5):
    """Numerically differentiate fn(*arrays) -> float w.r.t. every array entry."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*arrays)
            flat[i] = orig - h
            fm = fn(*arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, fd, floor=1e-6):
    """Largest relative error, ignoring entries where both grads are tiny."""
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(fd, dtype=np.float64)
    denom = np.maximum(np.abs(a), np.abs(f))
    err = np.abs(a - f) / np.maximum(denom, floor)
    err[denom <= floor] = 0.0
    return float(err.max()) if err.size else 0.0
