"""Walk-matrix analysis: spectral gaps, commute times, flow distances, diagnostics.

All eigenwork runs on symmetric matrices. The row-stochastic lazy walk
0.5 (I + D^{-1} A) shares its spectrum with 0.5 (I + D^{-1/2} A D^{-1/2})
(similarity by D^{1/2}), so gaps are always read off the symmetric form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, dijkstra

from . import adgrad as ad
from .graphcore import DEGREE_FLOOR, fmt17

_SYM_TOL = 1e-9
_EIG_FLOOR = 1e-10  # Laplacian null-space cutoff for the pseudoinverse


def _adj(g):
    """Accept a Graph-like object or a raw matrix; return dense float64."""
    a = getattr(g, "adjacency", g)
    if sp.issparse(a):
        a = a.toarray()
    return np.asarray(a, dtype=np.float64)


def symmetric_lazy_walk(a):
    """0.5 (I + D^{-1/2} A D^{-1/2}), zero-degree rows absorbing (diag 1).

    The dead-row convention mirrors the taped sym_norm primitive so taped and
    untaped gap computations agree bitwise.
    """
    a = _adj(a)
    if a.size and np.min(a) < 0:
        raise ValueError("adjacency entries must be nonnegative")
    d = a.sum(axis=1)
    dead = d <= DEGREE_FLOOR
    r = 1.0 / np.sqrt(np.maximum(d, DEGREE_FLOOR))
    m = a * r[:, None] * r[None, :]
    if np.any(dead):
        idx = np.where(dead)[0]
        m[idx, :] = 0.0
        m[:, idx] = 0.0
        m[idx, idx] = 1.0
    return 0.5 * (np.eye(a.shape[0]) + m)


def spectral_gap(w):
    """(gap, lambda2, v2) of a symmetric walk matrix; gap = 1 - lambda2."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] < 2:
        raise ValueError("walk matrix must be square with order >= 2")
    if np.max(np.abs(w - w.T)) > _SYM_TOL:
        raise ValueError("walk matrix not symmetric within 1e-9")
    vals, vecs = np.linalg.eigh(w)
    lam2 = vals[-2]
    return 1.0 - lam2, lam2, vecs[:, -2]


def taped_synthetic_gap(a_var):
    """Differentiable gap of the synthetic lazy walk 0.5 (I + D^{-1} A')."""
    n = a_var.shape[0]
    s = ad.sym_norm(a_var)
    w = ad.scale(ad.add_const(s, np.eye(n)), 0.5)
    lam2 = ad.eigen_gap(w)
    return ad.add_const(ad.scale(lam2, -1.0), np.asarray(1.0))


def gap_loss(a_var, a_sub):
    """|g_syn - g_sub| on the tape; A_sub is a constant reference graph.

    Both gaps use the degree-normalized lazy walk of the raw matrix, so a
    synthetic copy of A_sub scores exactly zero and uniform rescaling of A'
    leaves the loss unchanged.
    """
    g_sub, _, _ = spectral_gap(symmetric_lazy_walk(a_sub))
    g_syn = taped_synthetic_gap(a_var)
    return ad.abs_val(ad.add_const(g_syn, np.asarray(-g_sub)))


# ---------------------------------------------------------------------------
# commute times
# ---------------------------------------------------------------------------

def commute_matrix(g):
    """CT(u,v) = vol (G_uu + G_vv - G_uv - G_vu), G = pinv(D - A).

    Disconnected inputs are handled per component with the component's own
    volume; cross-component entries are +inf.
    """
    a = _adj(g)
    n = a.shape[0]
    ncomp, labels = connected_components(sp.csr_array(a), directed=False)
    ct = np.full((n, n), np.inf)
    np.fill_diagonal(ct, 0.0)
    for comp in range(ncomp):
        idx = np.where(labels == comp)[0]
        if idx.size == 1:
            continue
        sub = a[np.ix_(idx, idx)]
        deg = sub.sum(axis=1)
        lap = np.diag(deg) - sub
        vals, vecs = np.linalg.eigh(lap)
        inv = np.where(vals > _EIG_FLOOR, 1.0 / np.where(vals > _EIG_FLOOR, vals, 1.0), 0.0)
        green = (vecs * inv) @ vecs.T
        gd = np.diagonal(green)
        block = deg.sum() * (gd[:, None] + gd[None, :] - green - green.T)
        ct[np.ix_(idx, idx)] = block
    # formula noise can leave tiny negatives on the diagonal path
    np.fill_diagonal(ct, 0.0)
    return np.maximum(ct, 0.0)


def commute_heatmap_export(g, path, cap=20000.0):
    """CSV of min(CT, cap); +inf entries saturate at the cap."""
    if cap <= 0:
        raise ValueError("cap must be positive")
    m = np.minimum(commute_matrix(g), cap)
    write_matrix_csv(m, path)
    return m


def write_matrix_csv(m, path):
    with open(path, "w") as fh:
        for row in np.asarray(m):
            fh.write(",".join(fmt17(x) for x in row) + "\n")


def read_matrix_csv(path):
    return np.loadtxt(path, delimiter=",", ndmin=2)


# ---------------------------------------------------------------------------
# flow distance
# ---------------------------------------------------------------------------

def flow_distance(g):
    """All-pairs shortest-path weights; unreachable = +inf, d_ii = 0."""
    a = _adj(g)
    if a.size and np.min(a) < 0:
        raise ValueError("negative edge weight")
    return dijkstra(sp.csr_array(a), directed=False)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

@dataclass
class WalkReport:
    spectral_gap: float
    lambda2: float
    commute: np.ndarray
    flow_dist: np.ndarray
    mixing_estimate: float
    cheeger_lower: float
    cheeger_upper: float

    def validate(self):
        if not (0.0 <= self.spectral_gap <= 1.0):
            raise ValueError("spectral gap outside [0,1]")
        if np.max(np.abs(self.commute - self.commute.T)) > 1e-9:
            raise ValueError("commute matrix not symmetric")
        if np.any(np.diagonal(self.commute) != 0.0):
            raise ValueError("commute diagonal not zero")
        if np.any(np.diagonal(self.flow_dist) != 0.0):
            raise ValueError("flow diagonal not zero")
        n = self.flow_dist.shape[0]
        if n <= 128:
            d = self.flow_dist
            # relaxed[i,j] = min_k d[i,k] + d[k,j]
            relaxed = np.min(d[:, None, :] + d.T[None, :, :], axis=2)
            if np.any(d > relaxed + 1e-9):
                raise ValueError("flow distances violate the triangle inequality")
        return self


def normalized_laplacian_nu2(a):
    """Second-smallest eigenvalue of I - D^{-1/2} A D^{-1/2}."""
    a = _adj(a)
    d = a.sum(axis=1)
    r = 1.0 / np.sqrt(np.maximum(d, DEGREE_FLOOR))
    nlap = np.eye(a.shape[0]) - a * r[:, None] * r[None, :]
    vals = np.linalg.eigvalsh(nlap)
    return vals[1]


def walk_diagnostics(g, start=0):
    """(mixing_estimate, tv_curve, (cheeger_lower, cheeger_upper)).

    mixing_estimate = 1/gap of the lazy walk; tv_curve(t) is the total
    variation distance of the t-step lazy walk from `start` to the degree
    stationary distribution pi = d/vol; the Cheeger bounds bracket the true
    conductance via nu2/2 <= Phi <= sqrt(2 nu2).
    """
    a = _adj(g)
    n = a.shape[0]
    if n < 2:
        raise ValueError("diagnostics need at least 2 nodes")
    ncomp, _ = connected_components(sp.csr_array(a), directed=False)
    if ncomp != 1:
        raise ValueError("graph is disconnected")
    if not (0 <= start < n):
        raise ValueError("start node out of range")

    w = symmetric_lazy_walk(a)
    gap, _, _ = spectral_gap(w)
    mixing = 1.0 / gap

    d = a.sum(axis=1)
    vol = d.sum()
    pi = d / vol
    vals, vecs = np.linalg.eigh(w)
    # lazy spectrum lives in [0,1]; clip rounding noise so fractional powers
    # of the -1e-17 kind stay real
    vals = np.clip(vals, 0.0, 1.0)
    rt = np.sqrt(d)

    def tv_curve(t):
        # p(t) = e_start (0.5(I + D^-1 A))^t, via the symmetric form:
        # W^t = D^{-1/2} M^t D^{1/2}
        row = (vecs[start] * vals ** t) @ vecs.T
        p = row * rt / rt[start]
        return 0.5 * np.sum(np.abs(p - pi))

    nu2 = normalized_laplacian_nu2(a)
    return mixing, tv_curve, (nu2 / 2.0, np.sqrt(2.0 * nu2))


def tau_matrix(g):
    """Diagnostic pairwise scale 2/(pi_i pi_j) * (1/gap); print-only, not a loss."""
    a = _adj(g)
    d = a.sum(axis=1)
    pi = d / d.sum()
    gap, _, _ = spectral_gap(symmetric_lazy_walk(a))
    return 2.0 / (pi[:, None] * pi[None, :]) / gap


def walk_report(g, start=0):
    a = _adj(g)
    gap, lam2, _ = spectral_gap(symmetric_lazy_walk(a))
    mixing, _, (lo, hi) = walk_diagnostics(g, start=start)
    return WalkReport(
        spectral_gap=gap,
        lambda2=lam2,
        commute=commute_matrix(g),
        flow_dist=flow_distance(g),
        mixing_estimate=mixing,
        cheeger_lower=lo,
        cheeger_upper=hi,
    ).validate()
