"""Shared test helpers: finite-difference oracles and random point factories."""

import numpy as np


def fd_grad(f, x, h=1e-6):
    """Central finite differences of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def rel_err(analytic, numeric):
    """Max elementwise deviation, relative to the numeric gradient's scale."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = max(float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / denom


def random_ball_points(rng, n, d, c, max_frac=0.8):
    """Points with ||p|| <= max_frac / sqrt(c), uniform direction and radius."""
    v = rng.standard_normal((n, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = rng.uniform(0.0, max_frac, (n, 1)) / np.sqrt(c)
    return v * r
