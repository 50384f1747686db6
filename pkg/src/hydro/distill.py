"""Distillation loop: nested gradient matching with spectral-gap alignment.

Per epoch a subgraph is sampled and its lazy-walk gap and SGC propagation are
cached. Each outer iteration re-initializes the inner SGC; each inner
iteration builds one tape holding

    L_total = L_gm + gap_weight * |g_syn - g_sub| / max(g_sub, 1e-6)
              + beta * mean ||log0(x')||^2

and steps the ball-valued parameters (feature points, Mobius biases) with
Riemannian SGD + momentum while the Euclidean parameters (weights, batch-norm
affine) take Adam steps. The inner SGC weights move along the synthetic
gradient at the fixed rate 0.01.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import adgrad as ad
from . import gnn
from . import hypernet as hn
from . import manifold as mf
from . import spectral as spx
from .graphcore import CondensedGraph, fmt17, init_condensed, lazy_walk_sampled, sample_subgraph

log = logging.getLogger("hydro.distill")

PROBE_EVERY = 50
PROBE_GCN_EPOCHS = 200
SGC_LR = 0.01  # inner-model rate, fixed


class TrainingDivergence(Exception):
    """Loss or gradient went non-finite; carries the last good checkpoint."""

    def __init__(self, epoch, checkpoint=None):
        super().__init__(f"training diverged at epoch {epoch}")
        self.epoch = epoch
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class DistillConfig:
    ratio: float = 0.026
    epochs: int = 600
    outer: int = 10
    inner: int = 1
    lr_feat: float = 0.01
    lr_struct: float = 0.01
    beta: float = 0.1
    momentum: float = 0.01
    curvature: float = 0.01
    weight_decay: float = 5e-4
    sample_size: int = 256
    layers: int = 2
    hidden: int = 128
    sgc_k: int = 2
    gap_weight: float = 1.0
    seed: int = 0

    def validate(self):
        if not (0 < self.ratio <= 1):
            raise ValueError(f"ratio must be in (0, 1], got {self.ratio}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.outer < 1 or self.inner < 1:
            raise ValueError("outer and inner must be >= 1")
        if self.lr_feat < 0 or self.lr_struct < 0:
            raise ValueError("learning rates must be >= 0")
        if self.beta < 0 or self.gap_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight decay must be >= 0")
        if self.curvature <= 0:
            raise ValueError("curvature must be positive")
        if self.sample_size < 2:
            raise ValueError("sample size must be >= 2")
        if self.sgc_k < 0:
            raise ValueError("sgc_k must be >= 0")
        return self


# ---------------------------------------------------------------------------
# Riemannian SGD with momentum
# ---------------------------------------------------------------------------

class RiemannianOpt:
    """Momentum buffers are tangent vectors; after each step a buffer is
    re-based by parallel transport so its base point always equals the
    parameter's current position."""

    def __init__(self, c, lr, momentum=0.0, weight_decay=0.0):
        self.c = c
        self.lr = lr
        self.mu = momentum
        self.wd = weight_decay
        self.buffers = {}

    def step(self, key, p, euclid_grad):
        if not np.all(np.isfinite(euclid_grad)):
            raise ValueError("non-finite gradient")
        c = self.c
        conformal = (1.0 - c * mf._sqnorm(p)) ** 2 / 4.0
        rg = conformal * (euclid_grad + self.wd * mf.log0(p, c))
        m = self.buffers.get(key)
        m = rg if m is None else self.mu * m + rg
        p_new = mf.exp_map(p, -self.lr * m, c)
        self.buffers[key] = mf.parallel_transport(p, p_new, m, c)
        return p_new


def riemannian_step(p, euclid_grad, state, key="p"):
    """Single step through a RiemannianOpt state; returns the moved point."""
    return state.step(key, p, euclid_grad)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def match_loss(grads_syn, grads_real):
    """Sum of column-wise cosine distances across layer gradient pairs.

    grads_syn: list of tape Variables; grads_real: list of constant arrays.
    """
    if len(grads_syn) != len(grads_real):
        raise ValueError("layer count mismatch")
    if not grads_syn:
        raise ValueError("no gradient pairs")
    total = None
    for gs, gr in zip(grads_syn, grads_real):
        term = ad.cosine_match(gs, np.asarray(gr, dtype=np.float64))
        total = term if total is None else ad.add(total, term)
    return total


def total_loss(l_gm, l_rw_norm, l_reg, beta):
    """L_gm + L_rw_norm + beta * L_reg as plain floats."""
    for name, v in (("L_gm", l_gm), ("L_rw_norm", l_rw_norm), ("L_reg", l_reg)):
        if not np.isfinite(v) or v < 0:
            raise ValueError(f"{name} must be finite and nonnegative")
    return l_gm + l_rw_norm + beta * l_reg


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

@dataclass
class DistillResult:
    condensed: CondensedGraph
    history: list = field(repr=False, default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = 0.0


def _export(x_ball, params, labels, c):
    """Materialize the condensed artifact from the current parameters."""
    a = hn.forward_literal(params, x_ball)
    return CondensedGraph(
        n=x_ball.shape[0], adjacency=a,
        features=mf.log0(x_ball, c), labels=labels.copy(),
    ).validate()


def _assert_in_ball(x_ball, params, c):
    max_sq = (1.0 - mf.EPS_BOUNDARY) / c
    tol = 4.0 * np.finfo(np.float64).eps / c
    assert np.all(mf._sqnorm(x_ball, keepdims=False) <= max_sq + tol), \
        "feature point left the ball"
    for b in params.biases:
        assert np.sum(b * b) <= max_sq + tol, "bias left the ball"


def _probe(x_ball, params, labels, cfg, g, epoch):
    """Short GCN fit on the current condensed graph, scored on g's val split."""
    cg = _export(x_ball, params, labels, cfg.curvature)
    rng = np.random.default_rng([cfg.seed, epoch, 1])
    model = gnn.gcn_train(cg, epochs=PROBE_GCN_EPOCHS, rng=rng)
    out = gnn.gcn_infer(model, g)
    val = g.splits.get("val")
    if val is None or len(val) == 0:
        raise ValueError("probe needs a validation split")
    return gnn.accuracy(out.preds, g.labels, val), cg


def _sample_with_train(g, size, rng):
    # degenerate splits can yield train-free samples; retry a bounded number
    for _ in range(100):
        sub = sample_subgraph(g, size, rng)
        if len(sub.splits.get("train", ())) > 0:
            return sub
    raise ValueError("could not sample a subgraph containing train nodes")


def distill(g, cfg, log_path=None):
    """Condense g under cfg; returns a DistillResult.

    Raises TrainingDivergence (carrying the last good checkpoint) when the
    loss or any gradient goes non-finite.
    """
    cfg.validate()
    g.validate()
    c = cfg.curvature
    rng = np.random.default_rng(cfg.seed)

    cg0 = init_condensed(g, cfg.ratio, rng)
    labels = cg0.labels
    n_prime = cg0.n
    d_in = g.features.shape[1]
    # sampled real rows enter the ball through the origin map (clipped to the
    # boundary margin when long); exports read the tangent coordinates back
    x_ball = mf.exp0(cg0.features, c)
    hcfg = hn.HyperNetConfig(
        layers=cfg.layers, hidden=cfg.hidden, curvature=c, seed=cfg.seed,
    )
    params = hn.init_params(d_in, hcfg)
    num_classes = g.num_classes
    onehot_syn = gnn.one_hot(labels, num_classes)

    opt_ball = RiemannianOpt(c, cfg.lr_feat, cfg.momentum, cfg.weight_decay)
    opt_euclid = {}
    for group in ("weights", "bn_scale", "bn_shift"):
        for i, arr in enumerate(getattr(params, group)):
            opt_euclid[(group, i)] = gnn.AdamState(
                arr.shape, cfg.lr_struct, cfg.weight_decay)

    def theta_init():
        bound = np.sqrt(6.0 / (d_in + num_classes))
        return rng.uniform(-bound, bound, size=(d_in, num_classes))

    sample_size = min(cfg.sample_size, g.n)
    history = []
    val_acc, cg_now = _probe(x_ball, params, labels, cfg, g, epoch=0)
    best = (val_acc, 0, cg_now)

    epoch = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            sub = _sample_with_train(g, sample_size, rng)
            a_sub = sub.adjacency.toarray() if hasattr(sub.adjacency, "toarray") \
                else np.asarray(sub.adjacency)
            g_sub, _, _ = spx.spectral_gap(lazy_walk_sampled(a_sub))
            z_sub = gnn.sgc_propagate(sub, k=cfg.sgc_k)
            train_rows = np.asarray(sub.splits["train"], dtype=np.int64)
            onehot_sub = gnn.one_hot(sub.labels[train_rows], num_classes)

            last = None
            for _ in range(cfg.outer):
                theta = theta_init()
                for _ in range(cfg.inner):
                    zt = z_sub[train_rows]
                    p_real = gnn.softmax(zt @ theta)
                    g_real = zt.T @ (p_real - onehot_sub) / train_rows.size

                    tape = ad.Tape()
                    pv = hn.lift_params(tape, params)
                    xv = tape.leaf(x_ball)
                    a_var = hn.forward_taped(pv, xv, hcfg)
                    xe = ad.log0(xv, c=c)
                    g_syn = gnn.sgc_grad_taped(
                        a_var, xe, theta, onehot_syn, k=cfg.sgc_k)

                    l_gm = match_loss([g_syn], [g_real])
                    gap_syn = spx.taped_synthetic_gap(a_var)
                    l_rw = ad.scale(
                        ad.abs_val(ad.add_const(gap_syn, np.asarray(-g_sub))),
                        cfg.gap_weight / max(g_sub, 1e-6))
                    l_reg = ad.scale(ad.sum_all(ad.mul(xe, xe)), 1.0 / n_prime)
                    l_tot = ad.add(ad.add(l_gm, l_rw), ad.scale(l_reg, cfg.beta))
                    if not np.isfinite(l_tot.value):
                        raise ValueError("non-finite loss")
                    grads = ad.backward(l_tot)

                    x_ball = opt_ball.step("x", x_ball, grads[xv])
                    for i, bv in enumerate(pv.biases):
                        params.biases[i] = opt_ball.step(
                            ("b", i), params.biases[i], grads[bv])
                    for group, vars_ in (("weights", pv.weights),
                                         ("bn_scale", pv.bn_scale),
                                         ("bn_shift", pv.bn_shift)):
                        arrs = getattr(params, group)
                        for i, var in enumerate(vars_):
                            arrs[i] = opt_euclid[(group, i)].step(
                                arrs[i], grads[var])

                    theta = theta - SGC_LR * g_syn.value
                    last = (l_gm.value, l_rw.value, l_reg.value,
                            l_tot.value, gap_syn.value)

            _assert_in_ball(x_ball, params, c)
            l_gm_v, l_rw_v, l_reg_v, l_tot_v, gap_v = last
            probe_acc = None
            if epoch % PROBE_EVERY == 0 or epoch == cfg.epochs:
                probe_acc, cg_now = _probe(x_ball, params, labels, cfg, g, epoch)
                if probe_acc > best[0]:
                    best = (probe_acc, epoch, cg_now)
            history.append({
                "epoch": epoch,
                "L_gm": float(l_gm_v), "L_rw_norm": float(l_rw_v),
                "L_reg": float(l_reg_v), "L_total": float(l_tot_v),
                "g_syn": float(gap_v), "g_sub": float(g_sub),
                "probe_val_acc": probe_acc,
            })
    except ValueError as exc:
        if "non-finite" not in str(exc):
            raise
        log.error("divergence at epoch %d: %s", epoch, exc)
        _write_log(history, log_path)
        raise TrainingDivergence(epoch, checkpoint=best[2]) from exc

    _write_log(history, log_path)
    return DistillResult(
        condensed=best[2], history=history,
        best_epoch=best[1], best_val_acc=best[0],
    )


def _write_log(history, log_path):
    if log_path is None:
        return
    with open(log_path, "w") as fh:
        for row in history:
            acc = "null" if row["probe_val_acc"] is None \
                else fmt17(row["probe_val_acc"])
            fh.write(
                '{"epoch":%d,"L_gm":%s,"L_rw_norm":%s,"L_reg":%s,'
                '"L_total":%s,"g_syn":%s,"g_sub":%s,"probe_val_acc":%s}\n'
                % (row["epoch"], fmt17(row["L_gm"]), fmt17(row["L_rw_norm"]),
                   fmt17(row["L_reg"]), fmt17(row["L_total"]),
                   fmt17(row["g_syn"]), fmt17(row["g_sub"]), acc)
            )
