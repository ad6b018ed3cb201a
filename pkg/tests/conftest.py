"""Shared numeric test helpers."""

import numpy as np


def rel_err(a, b):
    """Relative error between two gradient arrays (norm form)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel())
    if na == 0.0 and nb == 0.0:
        return 0.0
    return float(np.linalg.norm((a - b).ravel()) / max(na, nb))


def numeric_grad(f, x, h=1e-6):
    """Central finite differences of scalar f() with respect to x, in place.

    f must read the current contents of x; every coordinate is perturbed.
    """
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g
