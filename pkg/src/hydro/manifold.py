"""Poincare ball calculus.

Every geometric primitive comes as a pair: a value function and an analytic
VJP (vector-Jacobian product) that the differentiation engine consumes.  All
functions are vectorized over leading axes; the last axis is the coordinate
axis.  Everything runs in float64: the 1e-9 round-trip tolerances the rest of
the system relies on are unreachable in single precision.

Conventions
-----------
- Curvature ``c > 0``; the ball is ``{x : c ||x||^2 < 1}``, radius ``1/sqrt(c)``.
- Ball-valued results are re-projected so ``||x||^2 <= (1 - EPS_BOUNDARY)/c``
  because artanh and the conformal factor diverge at the boundary.
- Zero-norm tangent vectors short-circuit exp_map to the identity, avoiding
  the 0/0 in ``u/||u||``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_BOUNDARY = 1e-5

# artanh argument clamp; float64 headroom, same role as the 1-1e-7 clamp used
# by float32 implementations.
_ATANH_CLAMP = 1.0 - 1e-15

# below this norm a tangent vector takes the u -> 0 branch
_ZERO_NORM = 1e-15


def artanh(x):
    """Numerically safe inverse hyperbolic tangent, clamped away from +-1."""
    return np.arctanh(np.clip(x, -_ATANH_CLAMP, _ATANH_CLAMP))


def _sqnorm(x, keepdims=True):
    return np.sum(x * x, axis=-1, keepdims=keepdims)


def _dot(x, y, keepdims=True):
    return np.sum(x * y, axis=-1, keepdims=keepdims)


def lambda_factor(p, c):
    """Conformal factor lambda_p = 2 / (1 - c ||p||^2)."""
    return 2.0 / (1.0 - c * _sqnorm(p))


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def project_to_ball(v, c):
    """Clip a vector to the ball interior.

    Points with ``||v||^2 < (1 - EPS_BOUNDARY)/c`` pass through unchanged;
    anything else is rescaled onto the sphere of squared radius
    ``(1 - EPS_BOUNDARY)/c``.

    Parameters
    ----------
    v : ndarray (..., d)
        Finite coordinates.
    c : float
        Positive curvature.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("project_to_ball: non-finite input")
    max_sq = (1.0 - EPS_BOUNDARY) / c
    sq = _sqnorm(v)
    # slight undershoot keeps the rescale strictly below the threshold so a
    # second projection is a bitwise no-op (idempotence)
    shrink = 1.0 - 4.0 * np.finfo(np.float64).eps
    scale = np.where(
        sq < max_sq, 1.0, shrink * np.sqrt(max_sq / np.maximum(sq, _ZERO_NORM))
    )
    return v * scale


def project_to_ball_vjp(v, c, g):
    """VJP of project_to_ball w.r.t. v."""
    v = np.asarray(v, dtype=np.float64)
    max_sq = (1.0 - EPS_BOUNDARY) / c
    sq = _sqnorm(v)
    active = sq >= max_sq
    # active branch: v -> shrink * R v/||v||, Jacobian R/||v|| (I - v v^T/||v||^2)
    shrink = 1.0 - 4.0 * np.finfo(np.float64).eps
    nrm = np.sqrt(np.maximum(sq, _ZERO_NORM))
    r_over = shrink * np.sqrt(max_sq) / nrm
    g_active = r_over * (g - _dot(g, v) * v / np.maximum(sq, _ZERO_NORM))
    return np.where(active, g_active, g)


# ---------------------------------------------------------------------------
# Mobius addition
# ---------------------------------------------------------------------------

def _mobius_raw(x, y, c):
    # unprojected closed form; callers project when the result is ball-valued
    xy = _dot(x, y)
    x2 = _sqnorm(x)
    y2 = _sqnorm(y)
    alpha = 1.0 + 2.0 * c * xy + c * y2
    beta = 1.0 - c * x2
    denom = 1.0 + 2.0 * c * xy + c * c * x2 * y2
    return (alpha * x + beta * y) / denom


def mobius_add(x, y, c):
    """Mobius addition x (+)_c y, re-projected inside the boundary margin.

    The gyrovector "vector addition" of the ball:

        ((1 + 2c<x,y> + c||y||^2) x + (1 - c||x||^2) y)
        / (1 + 2c<x,y> + c^2 ||x||^2 ||y||^2)

    Broadcasts over leading axes, so a single point can translate a batch.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(
            f"mobius_add: dimension mismatch {x.shape[-1]} vs {y.shape[-1]}"
        )
    return project_to_ball(_mobius_raw(x, y, c), c)


def _mobius_raw_vjp(x, y, c, g):
    # cotangents of the unprojected form w.r.t. both operands
    xy = _dot(x, y)
    x2 = _sqnorm(x)
    y2 = _sqnorm(y)
    alpha = 1.0 + 2.0 * c * xy + c * y2
    beta = 1.0 - c * x2
    denom = 1.0 + 2.0 * c * xy + c * c * x2 * y2
    out = (alpha * x + beta * y) / denom

    gx_ = _dot(g, x)
    gy_ = _dot(g, y)
    go_ = _dot(g, out)
    gx = (2.0 * c * gx_ * y + alpha * g - 2.0 * c * gy_ * x
          - go_ * (2.0 * c * y + 2.0 * c * c * y2 * x)) / denom
    gy = (2.0 * c * gx_ * (x + y) + beta * g
          - go_ * (2.0 * c * x + 2.0 * c * c * x2 * y)) / denom
    return gx, gy


def mobius_add_vjp(x, y, c, g):
    """VJP of mobius_add (projection included) w.r.t. (x, y)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    raw = _mobius_raw(x, y, c)
    g = project_to_ball_vjp(raw, c, g)
    gx, gy = _mobius_raw_vjp(x, y, c, g)
    # un-broadcast: a single point added to a batch accumulates over the batch
    gx = _unbroadcast(gx, x.shape)
    gy = _unbroadcast(gy, y.shape)
    return gx, gy


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


def gyration(a, b, u, c):
    """gyr[a,b]u via the Mobius-addition identity -(a(+)b) (+) (a (+) (b (+) u)).

    The identity is used because only the name, not the closed form, is pinned
    down; it is norm-preserving, which the transport invariant checks.
    """
    ab = _mobius_raw(a, b, c)
    return _mobius_raw(-ab, _mobius_raw(a, _mobius_raw(b, u, c), c), c)


# ---------------------------------------------------------------------------
# distance
# ---------------------------------------------------------------------------

def distance_sq(p1, p2, c):
    """Squared geodesic distance.

    d^2(p1, p2) = ( (2/sqrt(c)) artanh( sqrt(c) || (-p1) (+) p2 || ) )^2.
    Symmetric, zero iff p1 == p2.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    if p1.shape[-1] != p2.shape[-1]:
        raise ValueError("distance_sq: dimension mismatch")
    m = _mobius_raw(-p1, p2, c)
    sc = np.sqrt(c)
    d = (2.0 / sc) * artanh(sc * np.sqrt(np.maximum(_sqnorm(m, keepdims=False), 0.0)))
    # exact zero on exactly-coincident inputs; cancellation in the Mobius
    # difference otherwise leaves ~1e-33 residue
    eq = np.all(p1 == p2, axis=-1)
    return np.where(eq, 0.0, d * d)


def distance_sq_vjp(p1, p2, c, g):
    """VJP of distance_sq w.r.t. (p1, p2); g broadcasts against the scalar output."""
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    m = _mobius_raw(-p1, p2, c)
    r2 = _sqnorm(m)
    r = np.sqrt(np.maximum(r2, 0.0))
    sc = np.sqrt(c)
    g = np.asarray(g, dtype=np.float64)[..., None] if np.ndim(g) < m.ndim else g
    # d(d^2)/dm = 8 artanh(sc r) / (sc (1 - c r^2)) * m / r ; -> 0 as m -> 0
    safe_r = np.maximum(r, _ZERO_NORM)
    coef = 8.0 * artanh(sc * r) / (sc * (1.0 - c * r2) * safe_r)
    gm = np.where(r > _ZERO_NORM, g * coef * m, 0.0)
    gx, gy = _mobius_raw_vjp(-p1, p2, c, gm)
    return -gx, gy


# ---------------------------------------------------------------------------
# exp / log maps
# ---------------------------------------------------------------------------

def exp_map(p, u, c):
    """Exponential map at p in the direction of tangent vector u.

    exp_p(u) = p (+)_c tanh( sqrt(c) lambda_p ||u|| / 2 ) * u / (sqrt(c) ||u||),
    with exp_p(0) = p.  Result re-projected inside the boundary margin.
    """
    p = np.asarray(p, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    n = np.sqrt(np.maximum(_sqnorm(u), 0.0))
    sc = np.sqrt(c)
    lam = lambda_factor(p, c)
    safe_n = np.maximum(n, _ZERO_NORM)
    s = np.where(n > _ZERO_NORM, np.tanh(sc * lam * n / 2.0) * u / (sc * safe_n), 0.0)
    return project_to_ball(_mobius_raw(p, s, c), c)


def exp_map_vjp(p, u, c, g):
    """VJP of exp_map w.r.t. (p, u)."""
    p = np.asarray(p, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    n = np.sqrt(np.maximum(_sqnorm(u), 0.0))
    sc = np.sqrt(c)
    lam = lambda_factor(p, c)
    safe_n = np.maximum(n, _ZERO_NORM)
    t = np.tanh(sc * lam * n / 2.0)
    a = t / (sc * safe_n)                      # s = a * u
    s = np.where(n > _ZERO_NORM, a * u, 0.0)

    raw = _mobius_raw(p, s, c)
    g = project_to_ball_vjp(raw, c, g)
    gp_direct, gs = _mobius_raw_vjp(p, s, c, g)

    gsu = _dot(gs, u)
    # through a(n): da/dn = (1-t^2) lam/(2 n) - t/(sc n^2)
    da_dn = (1.0 - t * t) * lam / (2.0 * safe_n) - t / (sc * safe_n * safe_n)
    gu_full = a * gs + gsu * da_dn * u / safe_n
    # u -> 0: s ~ (lam/2) u, so the Jacobian w.r.t. u is (lam/2) I
    gu = np.where(n > _ZERO_NORM, gu_full, (lam / 2.0) * gs)
    # through lambda(p): da/dlam = (1-t^2) n sc /2 / (sc n) = (1-t^2)/2
    dlam_coeff = np.where(n > _ZERO_NORM, gsu * (1.0 - t * t) / 2.0 * c * lam * lam, 0.0)
    gp = gp_direct + dlam_coeff * p
    return _unbroadcast(gp, p.shape), _unbroadcast(gu, u.shape)


def log_map(p1, p2, c):
    """Logarithmic map: the tangent vector at p1 pointing to p2.

    log_{p1}(p2) = (2 / (sqrt(c) lambda_{p1})) artanh( sqrt(c) ||m|| ) m / ||m||,
    m = (-p1) (+)_c p2.  Inverse of exp_map; log_p(p) = 0.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    m = _mobius_raw(-p1, p2, c)
    r = np.sqrt(np.maximum(_sqnorm(m), 0.0))
    sc = np.sqrt(c)
    lam = lambda_factor(p1, c)
    safe_r = np.maximum(r, _ZERO_NORM)
    a = 2.0 * artanh(sc * r) / (sc * lam * safe_r)
    return np.where(r > _ZERO_NORM, a * m, 0.0)


def log_map_vjp(p1, p2, c, g):
    """VJP of log_map w.r.t. (p1, p2)."""
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    m = _mobius_raw(-p1, p2, c)
    r2 = _sqnorm(m)
    r = np.sqrt(np.maximum(r2, 0.0))
    sc = np.sqrt(c)
    lam = lambda_factor(p1, c)
    safe_r = np.maximum(r, _ZERO_NORM)
    at = artanh(sc * r)
    a = 2.0 * at / (sc * lam * safe_r)

    gm_m = _dot(g, m)
    # da/dr = (2/(sc lam r^2)) ( sc r/(1-c r^2) - artanh(sc r) )
    da_dr = 2.0 / (sc * lam * safe_r * safe_r) * (sc * r / (1.0 - c * r2) - at)
    gm_full = a * g + gm_m * da_dr * m / safe_r
    # m -> 0: out ~ (2/lam) m
    gm = np.where(r > _ZERO_NORM, gm_full, (2.0 / lam) * g)
    gx, gy = _mobius_raw_vjp(-p1, p2, c, gm)
    g1 = -gx
    # through lambda(p1): a ~ 1/lam
    g1 = g1 - np.where(r > _ZERO_NORM, gm_m * a * c * lam, 0.0) * p1
    return _unbroadcast(g1, p1.shape), _unbroadcast(gy, p2.shape)


def exp0(u, c):
    """Exponential map at the origin: tanh(sqrt(c)||u||) u / (sqrt(c)||u||)."""
    u = np.asarray(u, dtype=np.float64)
    n = np.sqrt(np.maximum(_sqnorm(u), 0.0))
    sc = np.sqrt(c)
    safe_n = np.maximum(n, _ZERO_NORM)
    out = np.where(n > _ZERO_NORM, np.tanh(sc * n) * u / (sc * safe_n), 0.0)
    return project_to_ball(out, c)


def exp0_vjp(u, c, g):
    """VJP of exp0 w.r.t. u."""
    u = np.asarray(u, dtype=np.float64)
    n = np.sqrt(np.maximum(_sqnorm(u), 0.0))
    sc = np.sqrt(c)
    safe_n = np.maximum(n, _ZERO_NORM)
    t = np.tanh(sc * n)
    a = t / (sc * safe_n)
    raw = np.where(n > _ZERO_NORM, a * u, 0.0)
    g = project_to_ball_vjp(raw, c, g)
    gu_ = _dot(g, u)
    da_dn = (1.0 - t * t) / safe_n - t / (sc * safe_n * safe_n)
    out = a * g + gu_ * da_dn * u / safe_n
    return np.where(n > _ZERO_NORM, out, g)


def log0(x, c):
    """Logarithmic map at the origin: artanh(sqrt(c)||x||) x / (sqrt(c)||x||)."""
    x = np.asarray(x, dtype=np.float64)
    n = np.sqrt(np.maximum(_sqnorm(x), 0.0))
    sc = np.sqrt(c)
    safe_n = np.maximum(n, _ZERO_NORM)
    return np.where(n > _ZERO_NORM, artanh(sc * n) * x / (sc * safe_n), 0.0)


def log0_vjp(x, c, g):
    """VJP of log0 w.r.t. x."""
    x = np.asarray(x, dtype=np.float64)
    n2 = _sqnorm(x)
    n = np.sqrt(np.maximum(n2, 0.0))
    sc = np.sqrt(c)
    safe_n = np.maximum(n, _ZERO_NORM)
    at = artanh(sc * n)
    a = at / (sc * safe_n)
    gx_ = _dot(g, x)
    da_dn = 1.0 / (safe_n * (1.0 - c * n2)) - at / (sc * safe_n * safe_n)
    out = a * g + gx_ * da_dn * x / safe_n
    return np.where(n > _ZERO_NORM, out, g)


# ---------------------------------------------------------------------------
# parallel transport
# ---------------------------------------------------------------------------

def parallel_transport(x, y, u, c):
    """Transport tangent vector u from base x to base y.

    PT_{x->y}(u) = gyr[y, -x](u) * lambda_x / lambda_y.  Preserves the
    Riemannian norm lambda_base * ||.||.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    return gyration(y, -x, u, c) * (lambda_factor(x, c) / lambda_factor(y, c))


def parallel_transport_vjp(x, y, u, c, g):
    """VJP of parallel_transport w.r.t. (x, y, u).

    The gyration is a fixed chain of three Mobius additions, so the reverse
    pass chains the Mobius VJPs by hand.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    a, b = y, -x
    w1 = _mobius_raw(b, u, c)
    w2 = _mobius_raw(a, w1, c)
    ab = _mobius_raw(a, b, c)
    out_g = _mobius_raw(-ab, w2, c)
    lam_x = lambda_factor(x, c)
    lam_y = lambda_factor(y, c)
    rho = lam_x / lam_y

    g_outg = rho * g
    go_ = _dot(g, out_g)
    g_negab, g_w2 = _mobius_raw_vjp(-ab, w2, c, g_outg)
    g_ab = -g_negab
    g_a2, g_w1 = _mobius_raw_vjp(a, w1, c, g_w2)
    g_a3, g_b3 = _mobius_raw_vjp(a, b, c, g_ab)
    g_b1, g_u = _mobius_raw_vjp(b, u, c, g_w1)
    g_a = g_a2 + g_a3
    g_b = g_b3 + g_b1

    gy = g_a + go_ * (-c * lam_x) * y          # d rho/dy = -c lam_x y ... times lam_y/lam_y
    gx = -g_b + go_ * (c * lam_x * lam_x / lam_y) * x
    return (_unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape),
            _unbroadcast(g_u, u.shape))


# ---------------------------------------------------------------------------
# hyperboloid conversion
# ---------------------------------------------------------------------------

def to_hyperboloid(x, c):
    """Lift a ball point onto the hyperboloid sheet with <h,h>_L = -1/c.

    h = sqrt(K)/(K - ||x||^2) * (K + ||x||^2, 2 sqrt(K) x), K = 1/c.  The
    sqrt(K) prefactor is what makes the Minkowski constraint
    -t^2 + ||s||^2 = -K hold for every curvature (it is invisible at c = 1).
    """
    x = np.asarray(x, dtype=np.float64)
    K = 1.0 / c
    q = _sqnorm(x)
    if np.any(q >= K):
        raise ValueError("to_hyperboloid: point outside the ball")
    d = K - q
    t = np.sqrt(K) * (K + q) / d
    s = 2.0 * K * x / d
    return np.concatenate([t, s], axis=-1)


def to_hyperboloid_vjp(x, c, g):
    """VJP of to_hyperboloid w.r.t. x."""
    x = np.asarray(x, dtype=np.float64)
    K = 1.0 / c
    q = _sqnorm(x)
    d = K - q
    gt = g[..., :1]
    gv = g[..., 1:]
    # dt = sqrt(K) * 2K/d^2 dq ; dv = 2K (dx/d + x dq/d^2), dq = 2 x.dx
    gvx = _dot(gv, x)
    coef = (np.sqrt(K) * gt * 2.0 * K / (d * d) + 2.0 * K * gvx / (d * d)) * 2.0
    return coef * x + (2.0 * K / d) * gv


# ---------------------------------------------------------------------------
# typed wrappers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PoincareBall:
    """Curvature-parameterized manifold; the home of all hyperbolic arithmetic."""

    c: float

    def __post_init__(self):
        if not (self.c > 0 and np.isfinite(self.c)):
            raise ValueError(f"curvature must be positive, got {self.c}")

    @property
    def radius(self):
        return 1.0 / np.sqrt(self.c)

    @property
    def max_sq_norm(self):
        # admissible squared norm after the boundary margin
        return (1.0 - EPS_BOUNDARY) / self.c

    def point(self, coords):
        return BallPoint(np.asarray(coords, dtype=np.float64), self)

    def origin(self, dim):
        return BallPoint(np.zeros(dim), self)

    def project(self, coords):
        return BallPoint(project_to_ball(coords, self.c), self)


@dataclass(frozen=True)
class BallPoint:
    """A point of a PoincareBall; construction enforces the margin invariant."""

    coords: np.ndarray
    ball: PoincareBall

    def __post_init__(self):
        sq = float(np.sum(self.coords * self.coords))
        if sq > (1.0 - EPS_BOUNDARY) / self.ball.c * (1.0 + 1e-12):
            raise ValueError(
                f"point norm^2 {sq:.6g} outside margin for c={self.ball.c}"
            )

    @property
    def dim(self):
        return self.coords.shape[-1]


@dataclass(frozen=True)
class TangentVector:
    """A tangent vector attached to a base point."""

    coords: np.ndarray
    base: BallPoint

    def __post_init__(self):
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("tangent vector has non-finite entries")
        if self.coords.shape[-1] != self.base.dim:
            raise ValueError("tangent dimension differs from base dimension")
