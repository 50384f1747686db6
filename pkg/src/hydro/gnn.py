"""The two GNNs the pipeline needs.

SGC is the inner model for gradient matching: K-hop propagation then a
linear classifier, with a closed-form cross-entropy gradient that can also
be expressed on the tape (so matching losses stay first-order).

GCN is the evaluation model: 2 layers, 256 hidden units, ReLU, dropout 0.5,
Adam-style steps with weight decay, trained full-batch for 500 epochs. All
gradients are hand-derived; the adjacency may be dense (condensed) or
sparse (original).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import adgrad as ad
from .graphcore import sym_norm_self_loops


def softmax(z):
    z = z - np.max(z, axis=1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=1, keepdims=True)


def one_hot(labels, num_classes):
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(logits, labels):
    z = logits - np.max(logits, axis=1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    return -np.mean(logp[np.arange(labels.shape[0]), labels])


def _train_mask(g):
    """CondensedGraph trains on every node; Graph trains on its train split.

    Falling back to all nodes for a Graph would leak val/test labels, so a
    missing or empty train split is an error there.
    """
    splits = getattr(g, "splits", None)
    if splits is None:
        return np.arange(g.n, dtype=np.int64)
    if "train" not in splits or len(splits["train"]) == 0:
        raise ValueError("graph has no train split")
    return np.asarray(splits["train"], dtype=np.int64)


class AdamState:
    """Adam with decoupled-from-nothing classic L2: g + wd*p feeds the moments."""

    def __init__(self, shape, lr, weight_decay=0.0, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.lr = lr
        self.wd = weight_decay
        self.b1 = beta1
        self.b2 = beta2
        self.eps = eps

    def step(self, p, grad):
        g = grad + self.wd * p
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * g
        self.v = self.b2 * self.v + (1.0 - self.b2) * g * g
        mh = self.m / (1.0 - self.b1 ** self.t)
        vh = self.v / (1.0 - self.b2 ** self.t)
        return p - self.lr * mh / (np.sqrt(vh) + self.eps)


# ---------------------------------------------------------------------------
# SGC
# ---------------------------------------------------------------------------

@dataclass
class SgcModel:
    k: int
    theta: np.ndarray

    def validate(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")
        return self


def sgc_propagate(g, k=2):
    """S^K X with S = D~^{-1/2}(A+I)D~^{-1/2}."""
    s = sym_norm_self_loops(g.adjacency)
    z = np.asarray(g.features, dtype=np.float64)
    for _ in range(k):
        z = s @ z
    return z


def sgc_forward(g, theta, k=2):
    if g.features.shape[1] != theta.shape[0]:
        raise ValueError(
            f"feature dim {g.features.shape[1]} != theta rows {theta.shape[0]}"
        )
    return sgc_propagate(g, k=k) @ theta


def sgc_grad(g, theta, k=2, mask=None):
    """Closed-form gradient of mean masked cross-entropy w.r.t. theta."""
    mask = _train_mask(g) if mask is None else np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise ValueError("empty mask")
    z = sgc_propagate(g, k=k)[mask]
    p = softmax(z @ theta)
    diff = p - one_hot(g.labels[mask], theta.shape[1])
    return z.T @ diff / mask.size


def sgc_grad_taped(a_var, x_tangent_var, theta, onehot, k=2):
    """The synthetic-side SGC gradient as a tape expression.

    a_var: (n,n) zero-diagonal adjacency Variable; x_tangent_var: (n,d)
    feature Variable; theta/onehot constant. All n rows supervise (condensed
    convention), so the denominator is n. First-order throughout: the
    gradient formula itself is the node, never differentiated twice.
    """
    n = a_var.shape[0]
    s = ad.sym_norm(ad.add_const(a_var, np.eye(n)))
    z = x_tangent_var
    for _ in range(k):
        z = ad.matmul(s, z)
    theta_leaf = a_var.tape.leaf(np.asarray(theta, dtype=np.float64))
    p = ad.softmax_rows(ad.matmul(z, theta_leaf))
    diff = ad.add_const(p, -np.asarray(onehot, dtype=np.float64))
    return ad.scale(ad.matmul(ad.transpose(z), diff), 1.0 / n)


def sgc_loss(g, theta, k=2, mask=None):
    mask = _train_mask(g) if mask is None else np.asarray(mask, dtype=np.int64)
    z = sgc_propagate(g, k=k)[mask]
    return cross_entropy(z @ theta, g.labels[mask])


# ---------------------------------------------------------------------------
# GCN
# ---------------------------------------------------------------------------

@dataclass
class GcnModel:
    w1: np.ndarray
    w2: np.ndarray
    losses: list = field(default_factory=list, repr=False)

    def validate(self):
        if not (np.all(np.isfinite(self.w1)) and np.all(np.isfinite(self.w2))):
            raise ValueError("non-finite weights")
        return self


@dataclass
class GcnOutput:
    preds: np.ndarray
    logits: np.ndarray
    embeddings: np.ndarray  # post-ReLU hidden activations


def _glorot(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def gcn_train(g, epochs=500, lr=0.01, rng=None, hidden=256, dropout=0.5,
              weight_decay=5e-4, mask=None):
    """Full-batch training on g's supervision mask; deterministic given rng."""
    rng = np.random.default_rng(0) if rng is None else rng
    x = np.asarray(g.features, dtype=np.float64)
    y = np.asarray(g.labels, dtype=np.int64)
    c = int(y.max()) + 1
    if np.bincount(y, minlength=c).min() < 1:
        raise ValueError("every class needs at least one labeled node")
    mask = _train_mask(g) if mask is None else np.asarray(mask, dtype=np.int64)
    a = sym_norm_self_loops(g.adjacency)

    w1 = _glorot(rng, x.shape[1], hidden)
    w2 = _glorot(rng, hidden, c)
    opt1 = AdamState(w1.shape, lr, weight_decay)
    opt2 = AdamState(w2.shape, lr, weight_decay)
    onehot = one_hot(y[mask], c)
    keep = 1.0 - dropout
    losses = []

    for _ in range(epochs):
        m0 = (rng.random(x.shape) < keep) / keep if dropout > 0.0 else None
        x0 = x if m0 is None else x * m0
        q1 = a @ (x0 @ w1)
        h = np.maximum(q1, 0.0)
        m1 = (rng.random(h.shape) < keep) / keep if dropout > 0.0 else None
        h2 = h if m1 is None else h * m1
        z2 = a @ (h2 @ w2)
        logits = z2[mask]
        losses.append(cross_entropy(logits, y[mask]))

        dz2 = np.zeros_like(z2)
        dz2[mask] = (softmax(logits) - onehot) / mask.size
        dp2 = a @ dz2
        dw2 = h2.T @ dp2
        dh2 = dp2 @ w2.T
        dh = dh2 if m1 is None else dh2 * m1
        dq1 = dh * (q1 > 0)
        dp1 = a @ dq1
        dw1 = x0.T @ dp1

        w1 = opt1.step(w1, dw1)
        w2 = opt2.step(w2, dw2)

    return GcnModel(w1=w1, w2=w2, losses=losses).validate()


def gcn_infer(model, g):
    """Deterministic inference; argmax ties resolve to the lowest class index."""
    x = np.asarray(g.features, dtype=np.float64)
    if x.shape[1] != model.w1.shape[0]:
        raise ValueError(
            f"feature dim {x.shape[1]} != model input dim {model.w1.shape[0]}"
        )
    a = sym_norm_self_loops(g.adjacency)
    h = np.maximum(a @ (x @ model.w1), 0.0)
    logits = a @ (h @ model.w2)
    return GcnOutput(preds=np.argmax(logits, axis=1), logits=logits, embeddings=h)


def accuracy(preds, labels, idx=None):
    if idx is not None:
        preds = preds[idx]
        labels = labels[idx]
    return float(np.mean(preds == labels))
