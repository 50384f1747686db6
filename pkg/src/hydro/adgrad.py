"""Minimal reverse-mode differentiation over a fixed primitive set.

Eager evaluation with taped replay: every primitive computes its value
immediately and appends one node holding operand snapshots and a VJP closure.
``backward`` walks the node list once in reverse, accumulating adjoints by
addition (the multivariate chain rule for fan-out), and returns a gradient
map for every node on the tape.  No graph compilation, no higher-order
derivatives, no dynamic control flow.

A Tape is single-threaded; independent tapes can run on different threads.
"""

from __future__ import annotations

import logging

import numpy as np

from . import manifold

log = logging.getLogger("hydro.adgrad")

# eigenvalue separation below which lambda_2 is treated as degenerate and the
# v2 v2^T adjoint becomes a logged subgradient choice
EIGEN_DEGENERACY_TOL = 1e-8


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self._values = []
        self._parents = []
        self._vjps = []

    def __len__(self):
        return len(self._values)

    def leaf(self, value):
        """Register an input Variable (no parents, identity VJP)."""
        return self._append(np.asarray(value, dtype=np.float64), (), None)

    def _append(self, value, parents, vjp):
        self._values.append(value)
        self._parents.append(parents)
        self._vjps.append(vjp)
        return Variable(self, len(self._values) - 1)


class Variable:
    """Handle to one tape node; shape is fixed at creation."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape, idx):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape._values[self.idx]

    @property
    def shape(self):
        return self.value.shape

    # -- sugar ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other) if isinstance(other, Variable) else add_const(self, other)

    def __radd__(self, other):
        return add_const(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Variable) else add_const(self, -np.asarray(other))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Variable) else scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Variable(idx={self.idx}, shape={self.shape})"


class Grads:
    """Gradient map {Variable -> tensor} returned by backward."""

    def __init__(self, adjoints, tape):
        self._adjoints = adjoints
        self._tape = tape

    def __getitem__(self, var):
        if var.tape is not self._tape:
            raise ValueError("variable is from a different tape")
        a = self._adjoints[var.idx]
        if a is None:
            return np.zeros_like(self._tape._values[var.idx])
        return a


def backward(loss):
    """Reverse pass from a scalar loss; visits nodes exactly once, in reverse.

    Deterministic: identical tapes produce bit-identical gradients.
    """
    if loss.value.shape != ():
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    tape = loss.tape
    adjoints = [None] * len(tape)
    adjoints[loss.idx] = np.asarray(1.0)
    for idx in range(loss.idx, -1, -1):
        a = adjoints[idx]
        if a is None:
            continue
        parents = tape._parents[idx]
        if not parents:
            continue
        contribs = tape._vjps[idx](a)
        for parent, contrib in zip(parents, contribs):
            if contrib is None:
                continue
            expect = tape._values[parent].shape
            if contrib.shape != expect:
                raise AssertionError(
                    f"adjoint shape {contrib.shape} != value shape {expect}"
                )
            if adjoints[parent] is None:
                adjoints[parent] = contrib.copy()
            else:
                adjoints[parent] = adjoints[parent] + contrib
    return Grads(adjoints, tape)


# ---------------------------------------------------------------------------
# primitive plumbing
# ---------------------------------------------------------------------------

def _same_tape(*vars_):
    t = vars_[0].tape
    for v in vars_[1:]:
        if v.tape is not t:
            raise ValueError("operands must live on the same tape")
    return t


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# dense algebra
# ---------------------------------------------------------------------------

def add(a, b):
    t = _same_tape(a, b)
    va, vb = a.value, b.value
    out = va + vb

    def vjp(g):
        return _unbroadcast(g, va.shape), _unbroadcast(g, vb.shape)

    return t._append(out, (a.idx, b.idx), vjp)


def sub(a, b):
    t = _same_tape(a, b)
    va, vb = a.value, b.value
    out = va - vb

    def vjp(g):
        return _unbroadcast(g, va.shape), _unbroadcast(-g, vb.shape)

    return t._append(out, (a.idx, b.idx), vjp)


def neg(a):
    return a.tape._append(-a.value, (a.idx,), lambda g: (-g,))


def mul(a, b):
    t = _same_tape(a, b)
    va, vb = a.value, b.value
    out = va * vb

    def vjp(g):
        return _unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)

    return t._append(out, (a.idx, b.idx), vjp)


def scale(a, k):
    k = float(k)
    return a.tape._append(k * a.value, (a.idx,), lambda g: (k * g,))


def add_const(a, const):
    const = np.asarray(const, dtype=np.float64)
    out = a.value + const
    if out.shape != a.value.shape:
        raise ValueError("add_const must preserve shape")
    return a.tape._append(out, (a.idx,), lambda g: (g,))


def matmul(a, b):
    t = _same_tape(a, b)
    va, vb = a.value, b.value
    out = va @ vb

    def vjp(g):
        return g @ vb.T, va.T @ g

    return t._append(out, (a.idx, b.idx), vjp)


def transpose(a):
    return a.tape._append(a.value.T.copy(), (a.idx,), lambda g: (g.T,))


def reshape(a, shape):
    old = a.value.shape
    return a.tape._append(
        a.value.reshape(shape), (a.idx,), lambda g: (g.reshape(old),)
    )


def sum_all(a):
    va = a.value
    return a.tape._append(
        np.asarray(np.sum(va)), (a.idx,), lambda g: (g * np.ones_like(va),)
    )


def mean_all(a):
    va = a.value
    n = va.size
    return a.tape._append(
        np.asarray(np.mean(va)), (a.idx,), lambda g: (g * np.ones_like(va) / n,)
    )


def abs_val(a):
    va = a.value
    # sign subgradient, 0 at 0
    return a.tape._append(np.abs(va), (a.idx,), lambda g: (g * np.sign(va),))


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def relu(a):
    va = a.value
    return a.tape._append(
        np.maximum(va, 0.0), (a.idx,), lambda g: (g * (va > 0.0),)
    )


def sigmoid(a):
    s = 1.0 / (1.0 + np.exp(-a.value))
    return a.tape._append(s, (a.idx,), lambda g: (g * s * (1.0 - s),))


def tanh(a):
    t = np.tanh(a.value)
    return a.tape._append(t, (a.idx,), lambda g: (g * (1.0 - t * t),))


def softmax_rows(a):
    z = a.value - np.max(a.value, axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return a.tape._append(s, (a.idx,), vjp)


# ---------------------------------------------------------------------------
# normalization / structure primitives
# ---------------------------------------------------------------------------

def standardize_cols(a, eps=1e-5):
    """Column-wise (axis 0) zero-mean unit-variance map with variance floor."""
    va = a.value
    n = va.shape[0]
    mu = np.mean(va, axis=0, keepdims=True)
    var = np.mean((va - mu) ** 2, axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (va - mu) * inv

    def vjp(g):
        gm = np.mean(g, axis=0, keepdims=True)
        gy = np.mean(g * y, axis=0, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return a.tape._append(y, (a.idx,), vjp)


def sym2(a):
    """Symmetrize: (A + A^T) / 2."""
    va = a.value
    return a.tape._append(
        0.5 * (va + va.T), (a.idx,), lambda g: (0.5 * (g + g.T),)
    )


def zero_diag(a):
    va = a.value.copy()
    np.fill_diagonal(va, 0.0)

    def vjp(g):
        g = g.copy()
        np.fill_diagonal(g, 0.0)
        return (g,)

    return a.tape._append(va, (a.idx,), vjp)


def sym_norm(a, degree_floor=1e-12):
    """D^{-1/2} A D^{-1/2} with absorbing fallback for zero-degree rows.

    Rows whose degree underflows the floor get a 1 on the diagonal (their
    off-diagonal mass is already zero for nonnegative symmetric input), which
    is the similarity-transformed image of the absorbing-row convention. The
    substituted entries carry no gradient.
    """
    va = a.value
    d = np.sum(va, axis=1)
    dead = d <= degree_floor
    r = 1.0 / np.sqrt(np.maximum(d, degree_floor))
    m = va * r[:, None] * r[None, :]
    if np.any(dead):
        idx = np.where(dead)[0]
        m[idx, :] = 0.0
        m[:, idx] = 0.0
        m[idx, idx] = 1.0

    def vjp(g):
        gm = g * m
        s = (np.sum(gm, axis=1) + np.sum(gm, axis=0)) / np.maximum(d, degree_floor)
        grad = g * r[:, None] * r[None, :] - 0.5 * s[:, None]
        if np.any(dead):
            idx = np.where(dead)[0]
            grad[idx, :] = 0.0
            grad[:, idx] = 0.0
        return (grad,)

    return a.tape._append(m, (a.idx,), vjp)


def eigen_gap(a):
    """Second-largest eigenvalue of a symmetric matrix; adjoint v2 v2^T.

    Near-degenerate lambda_2 (neighbor within EIGEN_DEGENERACY_TOL) is a
    documented subgradient choice along the eigensolver's returned vector;
    the event is logged for audit.
    """
    va = a.value
    if va.ndim != 2 or va.shape[0] != va.shape[1] or va.shape[0] < 2:
        raise ValueError("eigen_gap needs a square matrix of order >= 2")
    if np.max(np.abs(va - va.T)) > 1e-9:
        raise ValueError("eigen_gap: input not symmetric within 1e-9")
    vals, vecs = np.linalg.eigh(va)
    lam2 = vals[-2]
    v2 = vecs[:, -2]
    near = vals[-1] - lam2 < EIGEN_DEGENERACY_TOL
    if va.shape[0] >= 3:
        near = near or (lam2 - vals[-3] < EIGEN_DEGENERACY_TOL)
    if near:
        log.warning(
            "eigen_gap: lambda_2=%.12g is degenerate within %g; "
            "taking subgradient along the solver's eigenvector",
            lam2, EIGEN_DEGENERACY_TOL,
        )
    outer = np.outer(v2, v2)

    def vjp(g):
        return (g * outer,)

    return a.tape._append(np.asarray(lam2), (a.idx,), vjp)


def cosine_match(gs, gr):
    """Sum over columns of (1 - cosine) against a constant reference.

    Columns where either side has (near-)zero norm contribute 0 with zero
    gradient; the cosine has no value there and the subgradient choice is 0.
    """
    vs = gs.value
    gr = np.asarray(gr, dtype=np.float64)
    if vs.shape != gr.shape:
        raise ValueError(f"cosine_match shape mismatch {vs.shape} vs {gr.shape}")
    if vs.ndim == 1:
        vs2, gr2 = vs[:, None], gr[:, None]
    else:
        vs2, gr2 = vs, gr
    ns = np.sqrt(np.sum(vs2 * vs2, axis=0))
    nr = np.sqrt(np.sum(gr2 * gr2, axis=0))
    live = (ns > 1e-12) & (nr > 1e-12)
    dot = np.sum(vs2 * gr2, axis=0)
    denom = np.where(live, ns * nr, 1.0)
    cos = np.where(live, dot / denom, 1.0)  # dead columns contribute 1-1 = 0
    out = np.asarray(np.sum(1.0 - cos))

    def vjp(g):
        # d(1-cos)/dgs_col = -(gr/(ns nr) - dot gs/(ns^3 nr))
        coef = np.where(live, 1.0 / denom, 0.0)
        denom3 = np.where(live, ns**3 * nr, 1.0)
        term = gr2 * coef - vs2 * np.where(live, dot / denom3, 0.0)
        grad = -g * term
        return (grad.reshape(vs.shape),)

    return gs.tape._append(out, (gs.idx,), vjp)


# ---------------------------------------------------------------------------
# hyperbolic primitives (delegating to manifold VJPs)
# ---------------------------------------------------------------------------

def exp0(a, c):
    out = manifold.exp0(a.value, c)
    return a.tape._append(out, (a.idx,), lambda g: (manifold.exp0_vjp(a.value, c, g),))


def log0(a, c):
    out = manifold.log0(a.value, c)
    return a.tape._append(out, (a.idx,), lambda g: (manifold.log0_vjp(a.value, c, g),))


def mobius_add(a, b, c):
    t = _same_tape(a, b)
    va, vb = a.value, b.value
    out = manifold.mobius_add(va, vb, c)

    def vjp(g):
        return manifold.mobius_add_vjp(va, vb, c, g)

    return t._append(out, (a.idx, b.idx), vjp)


def project_ball(a, c):
    out = manifold.project_to_ball(a.value, c)
    return a.tape._append(
        out, (a.idx,), lambda g: (manifold.project_to_ball_vjp(a.value, c, g),)
    )


def exp_at(p, u, c):
    t = _same_tape(p, u)
    vp, vu = p.value, u.value
    out = manifold.exp_map(vp, vu, c)

    def vjp(g):
        return manifold.exp_map_vjp(vp, vu, c, g)

    return t._append(out, (p.idx, u.idx), vjp)


def log_at(p1, p2, c):
    t = _same_tape(p1, p2)
    v1, v2 = p1.value, p2.value
    out = manifold.log_map(v1, v2, c)

    def vjp(g):
        return manifold.log_map_vjp(v1, v2, c, g)

    return t._append(out, (p1.idx, p2.idx), vjp)


def pair_linear(xc, w, c):
    """Fused first generator layer: tangent output of the edge-pair linear map.

    Equals log0(project(exp0(concat(x_i, x_j) rows))) @ W computed without
    materializing the n^2 x 2d edge batch: the inner log0/exp0 pair reduces to
    a tangent-norm clip t = e * min(1, L_max/||e||), and the clip scale is
    shared by both halves of each row, so row (i,j) maps to
    phi_ij * (U_i + V_j) with U = X W_top, V = X W_bot.

    xc: (n, d) ball-point coordinates; w: (2d, h).  Output (n*n, h).
    """
    t = _same_tape(xc, w)
    x = xc.value
    wv = w.value
    n, d = x.shape
    if wv.shape[0] != 2 * d:
        raise ValueError(f"pair_linear: weight rows {wv.shape[0]} != 2*{d}")
    # matches log0(project(exp0(e))): projection rescales to the margin radius
    # times its 4-ulp shrink, so the clipped tangent length carries it too
    shrink = 1.0 - 4.0 * np.finfo(np.float64).eps
    l_max = manifold.artanh(shrink * np.sqrt(1.0 - manifold.EPS_BOUNDARY)) / np.sqrt(c)
    q = np.sum(x * x, axis=1)
    s = q[:, None] + q[None, :]
    norm = np.sqrt(np.maximum(s, 1e-30))
    phi = np.minimum(1.0, l_max / norm)
    u = x @ wv[:d]
    v = x @ wv[d:]
    pairs = phi[:, :, None] * (u[:, None, :] + v[None, :, :])
    out = pairs.reshape(n * n, -1)

    def vjp(g):
        gg = g.reshape(n, n, -1)
        gphi_w = gg * phi[:, :, None]
        gu = gphi_w.sum(axis=1)
        gv = gphi_w.sum(axis=0)
        gx = gu @ wv[:d].T + gv @ wv[d:].T
        gw = np.concatenate([x.T @ gu, x.T @ gv], axis=0)
        active = phi < 1.0
        if np.any(active):
            a_sum = u[:, None, :] + v[None, :, :]
            gphi = np.sum(gg * a_sum, axis=2)
            # phi = L/sqrt(s): dphi/ds = -L/(2 s^{3/2}); ds/dq_i hits row and col
            dphi_ds = np.where(active, -l_max / (2.0 * s * norm), 0.0)
            gs_ = gphi * dphi_ds
            gq = gs_.sum(axis=1) + gs_.sum(axis=0)
            gx = gx + 2.0 * x * gq[:, None]
        return gx, gw

    return t._append(out, (xc.idx, w.idx), vjp)


# ---------------------------------------------------------------------------
# registry + spec-style record()
# ---------------------------------------------------------------------------

PRIMITIVES = {
    "add": add,
    "sub": sub,
    "neg": neg,
    "mul": mul,
    "scale": scale,
    "add_const": add_const,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "sum": sum_all,
    "mean": mean_all,
    "abs": abs_val,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softmax_rows": softmax_rows,
    "standardize_cols": standardize_cols,
    "sym2": sym2,
    "zero_diag": zero_diag,
    "sym_norm": sym_norm,
    "eigen_gap": eigen_gap,
    "cosine_match": cosine_match,
    "exp0": exp0,
    "log0": log0,
    "mobius_add": mobius_add,
    "project_ball": project_ball,
    "exp_at": exp_at,
    "log_at": log_at,
    "pair_linear": pair_linear,
}


def record(primitive, *operands, **params):
    """Apply a registered primitive to Variables; value computed eagerly."""
    if primitive not in PRIMITIVES:
        raise KeyError(f"unknown primitive {primitive!r}")
    return PRIMITIVES[primitive](*operands, **params)
