"""Synthetic-structure generator: a hyperbolic MLP over node-pair embeddings.

Pipeline per pair (i,j): concat(x'_i, x'_j) -> exp-map lift into the ball ->
Mobius linear layers with tangent batch norm and hyperbolic ReLU -> scalar
edge logit read in the tangent space at the origin -> symmetrize -> sigmoid
-> zero diagonal.

Two forward paths exist. forward_literal composes the layer ops exactly as
written, on ndarrays. forward_taped produces the same numbers on a tape for
backprop, with the first layer fused (lift + log0 + matmul collapse to a
norm clip that is inactive for in-ball inputs); agreement is tested at 1e-12.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import adgrad as ad
from . import manifold as mf
from .graphcore import fmt17

MAX_NODES = 512


@dataclass(frozen=True)
class HyperNetConfig:
    layers: int = 2
    hidden: int = 128
    curvature: float = 0.01
    seed: int = 0

    def validate(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if not (self.curvature > 0 and np.isfinite(self.curvature)):
            raise ValueError("curvature must be a positive real")
        return self


@dataclass
class HyperNetParams:
    """weights[l]: (d_l, d_{l+1}); biases[l]: ball point (d_{l+1},);
    bn_scale/bn_shift: one pair per hidden layer."""

    weights: list
    biases: list
    bn_scale: list
    bn_shift: list
    config: HyperNetConfig

    def validate(self):
        ball = mf.PoincareBall(self.config.curvature)
        for w in self.weights:
            if not np.all(np.isfinite(w)):
                raise ValueError("non-finite weight")
        for b in self.biases:
            ball.point(b)  # raises if outside the margin
        if len(self.bn_scale) != len(self.weights) - 1:
            raise ValueError("need one batch-norm pair per hidden layer")
        return self


def layer_dims(d_in, cfg):
    return [2 * d_in] + [cfg.hidden] * (cfg.layers - 1) + [1]


def init_params(d_in, cfg):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; biases at the origin."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    dims = layer_dims(d_in, cfg)
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(a)
        weights.append(rng.uniform(-bound, bound, size=(a, b)))
        biases.append(np.zeros(b))
    nh = cfg.layers - 1
    return HyperNetParams(
        weights=weights,
        biases=biases,
        bn_scale=[np.ones(dims[l + 1]) for l in range(nh)],
        bn_shift=[np.zeros(dims[l + 1]) for l in range(nh)],
        config=cfg,
    ).validate()


# ---------------------------------------------------------------------------
# literal layer ops
# ---------------------------------------------------------------------------

def edge_embed(x):
    """Row i*n+j is the concatenation [x_i, x_j]; shape (n^2, 2d)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n > MAX_NODES:
        raise ValueError(f"n'={n} exceeds the dense edge-batch ceiling {MAX_NODES}")
    return np.concatenate(
        [np.repeat(x, n, axis=0), np.tile(x, (n, 1))], axis=1
    )


def lift(e, c):
    return mf.exp0(e, c)


def mobius_linear(z, w, b, c):
    """b mobius-plus exp0(log0(z) @ W); boundary-projected throughout."""
    t = mf.log0(z, c)
    if t.shape[-1] != w.shape[0]:
        raise ValueError(f"weight rows {w.shape[0]} != input dim {t.shape[-1]}")
    if w.shape[1] != np.shape(b)[-1]:
        raise ValueError("bias dim != weight columns")
    return mf.mobius_add(b, mf.exp0(t @ w, c), c)


def tangent_batchnorm(z, scale, shift, c, eps=1e-5):
    if z.shape[0] < 2:
        raise ValueError("batch norm needs a batch of at least 2")
    t = mf.log0(z, c)
    # mirrors the taped standardization op for exact path agreement
    mu = np.mean(t, axis=0, keepdims=True)
    var = np.mean((t - mu) ** 2, axis=0, keepdims=True)
    y = (t - mu) / np.sqrt(var + eps)
    return mf.exp0(y * scale + shift, c)


def hyperbolic_relu(z, c):
    return mf.exp0(np.maximum(mf.log0(z, c), 0.0), c)


def adjacency_head(z, n, c):
    """Scalar logits from tangent coordinate 0 -> symmetrize -> sigmoid -> zero diag."""
    t = mf.log0(z, c)
    logits = t[:, 0].reshape(n, n)
    sym = 0.5 * (logits + logits.T)
    a = expit(sym)
    np.fill_diagonal(a, 0.0)
    return a


def forward_literal(params, x, collect=None):
    """A' from ball-point coordinates x (n, d). `collect` gathers the
    hyperbolic intermediates for invariant checks."""
    cfg = params.config
    c = cfg.curvature
    n = x.shape[0]
    z = lift(edge_embed(x), c)
    if collect is not None:
        collect.append(z)
    for l in range(cfg.layers - 1):
        z = mobius_linear(z, params.weights[l], params.biases[l], c)
        z = tangent_batchnorm(z, params.bn_scale[l], params.bn_shift[l], c)
        z = hyperbolic_relu(z, c)
        if collect is not None:
            collect.append(z)
    z = mobius_linear(z, params.weights[-1], params.biases[-1], c)
    if collect is not None:
        collect.append(z)
    return adjacency_head(z, n, c)


# ---------------------------------------------------------------------------
# taped forward
# ---------------------------------------------------------------------------

@dataclass
class HyperNetVars:
    weights: list
    biases: list
    bn_scale: list
    bn_shift: list

    def all_vars(self):
        return self.weights + self.biases + self.bn_scale + self.bn_shift


def lift_params(tape, params):
    return HyperNetVars(
        weights=[tape.leaf(w) for w in params.weights],
        biases=[tape.leaf(b) for b in params.biases],
        bn_scale=[tape.leaf(s) for s in params.bn_scale],
        bn_shift=[tape.leaf(s) for s in params.bn_shift],
    )


def forward_taped(pv, x_var, cfg):
    """Tape twin of forward_literal; x_var is the (n, d) ball-coordinate leaf."""
    c = cfg.curvature
    n = x_var.shape[0]
    if n > MAX_NODES:
        raise ValueError(f"n'={n} exceeds the dense edge-batch ceiling {MAX_NODES}")
    # fused first layer: tangent output of the pair linear map
    t = ad.pair_linear(x_var, pv.weights[0], c=c)
    z = ad.mobius_add(pv.biases[0], ad.exp0(t, c=c), c=c)
    for l in range(cfg.layers - 1):
        if l > 0:
            h = ad.matmul(ad.log0(z, c=c), pv.weights[l])
            z = ad.mobius_add(pv.biases[l], ad.exp0(h, c=c), c=c)
        y = ad.standardize_cols(ad.log0(z, c=c))
        y = ad.add(ad.mul(y, pv.bn_scale[l]), pv.bn_shift[l])
        z = ad.exp0(y, c=c)
        z = ad.exp0(ad.relu(ad.log0(z, c=c)), c=c)
    if cfg.layers > 1:
        h = ad.matmul(ad.log0(z, c=c), pv.weights[-1])
        z = ad.mobius_add(pv.biases[-1], ad.exp0(h, c=c), c=c)
    logits = ad.reshape(ad.log0(z, c=c), (n, n))
    return ad.zero_diag(ad.sigmoid(ad.sym2(logits)))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _mat_json(m):
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    rows = ",".join(
        "[" + ",".join(fmt17(x) for x in row) + "]" for row in m
    )
    return "[" + rows + "]"


def save_params(params, path):
    cfg = params.config
    parts = [
        '{"config":{"layers":%d,"hidden":%d,"curvature":%s,"seed":%d}'
        % (cfg.layers, cfg.hidden, fmt17(cfg.curvature), cfg.seed)
    ]
    parts.append('"shapes":' + json.dumps(
        [list(w.shape) for w in params.weights], separators=(",", ":")))
    for name, group in (
        ("weights", params.weights), ("biases", params.biases),
        ("bn_scale", params.bn_scale), ("bn_shift", params.bn_shift),
    ):
        parts.append('"%s":[%s]' % (name, ",".join(_mat_json(m) for m in group)))
    with open(path, "w") as fh:
        fh.write(",".join(parts) + "}\n")


def load_params(path):
    with open(path) as fh:
        doc = json.load(fh)
    cfg = HyperNetConfig(**doc["config"]).validate()
    weights = [np.asarray(w, dtype=np.float64) for w in doc["weights"]]
    return HyperNetParams(
        weights=[w.reshape(s) for w, s in zip(weights, doc["shapes"])],
        biases=[np.asarray(b, dtype=np.float64).reshape(-1) for b in doc["biases"]],
        bn_scale=[np.asarray(s, dtype=np.float64).reshape(-1) for s in doc["bn_scale"]],
        bn_shift=[np.asarray(s, dtype=np.float64).reshape(-1) for s in doc["bn_shift"]],
        config=cfg,
    ).validate()
