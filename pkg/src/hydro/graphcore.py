"""Graph data model, canonical on-disk formats, sampling, walk matrices.

Canonical dataset directory:
    edges.csv      one "u,v" pair per line, 0-based, each undirected edge once
    features.csv   n rows of d comma-separated decimals
    labels.csv     n integer lines
    splits.json    {"train": [...], "val": [...], "test": [...]}

Condensed artifact: a single JSON document (see save_condensed) with dense
row-major matrices, decimals rendered with 17 significant digits so that
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import io
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.sparse as sp

log = logging.getLogger("hydro.graphcore")

# substituted degree for zero-degree rows, used only inside the inverse
DEGREE_FLOOR = 1e-12


class IngestionError(Exception):
    """Dataset directory or artifact fails validation."""


def fmt17(x):
    """Canonical decimal rendering: 17 significant digits."""
    return f"{float(x):.17g}"


@dataclass
class Graph:
    """Original dataset: adjacency + features + labels + splits."""

    n: int
    adjacency: "sp.sparse.sparray | np.ndarray"
    features: np.ndarray
    labels: np.ndarray
    splits: dict = field(default_factory=dict)

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if self.n else 0

    @property
    def num_edges(self):
        a = self.adjacency
        nnz = a.nnz if sp.issparse(a) else int(np.count_nonzero(a))
        return nnz // 2

    def degrees(self):
        a = self.adjacency
        d = np.asarray(a.sum(axis=1)).reshape(-1)
        return d.astype(np.float64)

    def validate(self):
        a = self.adjacency
        if a.shape != (self.n, self.n):
            raise IngestionError(f"adjacency shape {a.shape} != ({self.n}, {self.n})")
        asym = abs(a - a.T)
        max_asym = asym.max() if sp.issparse(a) else np.max(asym) if a.size else 0.0
        if max_asym > 1e-12:
            raise IngestionError("adjacency not symmetric within 1e-12")
        diag = a.diagonal() if sp.issparse(a) else np.diagonal(a)
        if self.n and np.max(np.abs(diag)) != 0.0:
            raise IngestionError("adjacency has nonzero diagonal")
        if self.features.shape[0] != self.n:
            raise IngestionError(
                f"feature rows {self.features.shape[0]} != n {self.n}"
            )
        if self.labels.shape != (self.n,):
            raise IngestionError("labels length != n")
        if self.n and (self.labels.min() < 0):
            raise IngestionError("negative label")
        seen = np.zeros(self.n, dtype=bool)
        for name, idx in self.splits.items():
            if len(idx) and (idx.min() < 0 or idx.max() >= self.n):
                raise IngestionError(f"split {name} index out of range")
            if np.any(seen[idx]):
                raise IngestionError("splits overlap")
            seen[idx] = True
        return self


@dataclass
class CondensedGraph:
    """Synthetic product: A' in [0,1]^{n'xn'}, features, labels, provenance."""

    n: int
    adjacency: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    config_hash: str = ""
    seed: int = -1

    def validate(self):
        a = self.adjacency
        if a.shape != (self.n, self.n):
            raise ValueError("adjacency shape mismatch")
        if not np.array_equal(a, a.T):
            raise ValueError("adjacency must be exactly symmetric")
        if np.any(np.diagonal(a) != 0.0):
            raise ValueError("adjacency diagonal must be zero")
        if np.min(a) < 0.0 or np.max(a) > 1.0:
            raise ValueError("adjacency entries must lie in [0,1]")
        if self.features.shape[0] != self.n or self.labels.shape != (self.n,):
            raise ValueError("feature/label shapes inconsistent with n")
        return self


# ---------------------------------------------------------------------------
# dataset IO
# ---------------------------------------------------------------------------

def load_dataset(path):
    """Read and validate a canonical dataset directory."""
    def p(name):
        full = os.path.join(path, name)
        if not os.path.exists(full):
            raise IngestionError(f"missing file: {full}")
        return full

    labels = np.loadtxt(p("labels.csv"), dtype=np.int64, ndmin=1)
    n = labels.shape[0]
    # round_trip parsing: decimals written with 17 significant digits must
    # come back bit-identical
    features = pd.read_csv(
        p("features.csv"), header=None, dtype=np.float64,
        float_precision="round_trip",
    ).to_numpy()

    edges_path = p("edges.csv")
    if os.path.getsize(edges_path) == 0:
        log.warning("empty edges.csv: graph has zero edges")
        pairs = np.zeros((0, 2), dtype=np.int64)
    else:
        pairs = np.loadtxt(edges_path, dtype=np.int64, delimiter=",", ndmin=2)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
        raise IngestionError("edge endpoint out of range")

    self_loops = pairs[:, 0] == pairs[:, 1] if pairs.size else np.zeros(0, bool)
    if np.any(self_loops):
        log.warning("dropping %d self-loop(s); adjacency keeps a zero diagonal",
                    int(self_loops.sum()))
        pairs = pairs[~self_loops]

    # canonical undirected key: (min, max); duplicates and reverse duplicates
    # collapse to one edge, with a warning (auto-symmetrization)
    if pairs.size:
        key = np.sort(pairs, axis=1)
        uniq = np.unique(key, axis=0)
        if uniq.shape[0] != pairs.shape[0]:
            log.warning(
                "edge list not listed once per undirected edge "
                "(%d lines, %d unique); auto-symmetrized",
                pairs.shape[0], uniq.shape[0],
            )
        rows = np.concatenate([uniq[:, 0], uniq[:, 1]])
        cols = np.concatenate([uniq[:, 1], uniq[:, 0]])
        adj = sp.csr_array(
            (np.ones(rows.shape[0]), (rows, cols)), shape=(n, n), dtype=np.float64
        )
    else:
        adj = sp.csr_array((n, n), dtype=np.float64)

    with open(p("splits.json")) as fh:
        raw = json.load(fh)
    for key_name in ("train", "val", "test"):
        if key_name not in raw:
            raise IngestionError(f"splits.json missing key {key_name!r}")
    splits = {k: np.asarray(sorted(raw[k]), dtype=np.int64)
              for k in ("train", "val", "test")}

    try:
        return Graph(n, adj, features, labels, splits).validate()
    except IngestionError:
        raise
    except Exception as exc:  # e.g. ragged features
        raise IngestionError(str(exc)) from exc


def save_dataset(g, path):
    """Write a Graph back out in canonical byte-stable form."""
    os.makedirs(path, exist_ok=True)
    a = g.adjacency.tocoo() if sp.issparse(g.adjacency) else sp.coo_array(g.adjacency)
    mask = a.row < a.col
    order = np.lexsort((a.col[mask], a.row[mask]))
    with open(os.path.join(path, "edges.csv"), "w") as fh:
        for u, v in zip(a.row[mask][order], a.col[mask][order]):
            fh.write(f"{u},{v}\n")
    with open(os.path.join(path, "features.csv"), "w") as fh:
        for row in g.features:
            fh.write(",".join(fmt17(x) for x in row) + "\n")
    with open(os.path.join(path, "labels.csv"), "w") as fh:
        for y in g.labels:
            fh.write(f"{y}\n")
    with open(os.path.join(path, "splits.json"), "w") as fh:
        fh.write(json.dumps(
            {k: [int(i) for i in sorted(g.splits.get(k, []))]
             for k in ("train", "val", "test")},
            separators=(",", ":"),
        ))
        fh.write("\n")


def save_condensed(cg, path):
    """Serialize a CondensedGraph to canonical JSON (17 significant digits)."""
    cg.validate()
    buf = io.StringIO()
    buf.write('{"n":%d,"adjacency":[' % cg.n)
    buf.write(",".join(
        "[" + ",".join(fmt17(x) for x in row) + "]" for row in cg.adjacency
    ))
    buf.write('],"features":[')
    buf.write(",".join(
        "[" + ",".join(fmt17(x) for x in row) + "]" for row in cg.features
    ))
    buf.write('],"labels":[')
    buf.write(",".join(str(int(y)) for y in cg.labels))
    buf.write('],"config_hash":%s,"seed":%d}' % (json.dumps(cg.config_hash), cg.seed))
    buf.write("\n")
    data = buf.getvalue()
    with open(path, "w") as fh:
        fh.write(data)


def load_condensed(path):
    if not os.path.exists(path):
        raise IngestionError(f"missing file: {path}")
    with open(path) as fh:
        doc = json.load(fh)
    try:
        cg = CondensedGraph(
            n=int(doc["n"]),
            adjacency=np.asarray(doc["adjacency"], dtype=np.float64),
            features=np.asarray(doc["features"], dtype=np.float64),
            labels=np.asarray(doc["labels"], dtype=np.int64),
            config_hash=str(doc["config_hash"]),
            seed=int(doc["seed"]),
        )
        return cg.validate()
    except (KeyError, ValueError) as exc:
        raise IngestionError(f"bad condensed artifact: {exc}") from exc


# ---------------------------------------------------------------------------
# walk matrices
# ---------------------------------------------------------------------------

def lazy_walk_synthetic(a):
    """Row-stochastic lazy walk 0.5 (I + D^{-1} A').

    Zero-degree rows become absorbing: the degree floor is substituted only
    inside the inverse and the (numerically zero) off-diagonal mass is
    dropped, leaving the identity row.
    """
    a = np.asarray(a, dtype=np.float64)
    if np.min(a) < 0:
        raise ValueError("adjacency entries must be nonnegative")
    d = a.sum(axis=1)
    dead = d <= DEGREE_FLOOR
    w = a / np.maximum(d, DEGREE_FLOOR)[:, None]
    if np.any(dead):
        idx = np.where(dead)[0]
        w[idx, :] = 0.0
        w[idx, idx] = 1.0
    return 0.5 * (np.eye(a.shape[0]) + w)


def lazy_walk_sampled(a):
    """Symmetric lazy walk of a sampled subgraph: 0.5 (I + D~^{-1/2} A~ D~^{-1/2}).

    A~ = A + I, so degrees are strictly positive; the spectrum lies in [0, 1].
    """
    if sp.issparse(a):
        a = a.toarray()
    a = np.asarray(a, dtype=np.float64)
    at = a + np.eye(a.shape[0])
    r = 1.0 / np.sqrt(at.sum(axis=1))
    return 0.5 * (np.eye(a.shape[0]) + at * r[:, None] * r[None, :])


def sym_norm_self_loops(a):
    """SGC/GCN propagation operator D~^{-1/2} (A + I) D~^{-1/2} (dense or sparse)."""
    if sp.issparse(a):
        at = (a + sp.eye_array(a.shape[0], format="csr")).tocsr()
        r = 1.0 / np.sqrt(np.asarray(at.sum(axis=1)).reshape(-1))
        rd = sp.dia_array((r[None, :], [0]), shape=a.shape).tocsr()
        return rd @ at @ rd
    a = np.asarray(a, dtype=np.float64)
    at = a + np.eye(a.shape[0])
    r = 1.0 / np.sqrt(at.sum(axis=1))
    return at * r[:, None] * r[None, :]


# ---------------------------------------------------------------------------
# sampling / initialization
# ---------------------------------------------------------------------------

def sample_subgraph(g, size, rng):
    """Induced subgraph on `size` nodes drawn uniformly without replacement.

    Splits are remapped into sample-local indices so the training mask of the
    sample is directly usable.
    """
    if not (1 <= size <= g.n):
        raise ValueError(f"sample size {size} outside [1, {g.n}]")
    nodes = rng.choice(g.n, size=size, replace=False)
    a = g.adjacency
    sub = a[nodes][:, nodes] if sp.issparse(a) else a[np.ix_(nodes, nodes)]
    splits = {}
    for name, idx in g.splits.items():
        member = np.isin(nodes, idx)
        splits[name] = np.where(member)[0].astype(np.int64)
    return Graph(
        n=size,
        adjacency=sub,
        features=g.features[nodes],
        labels=g.labels[nodes],
        splits=splits,
    )


def apportion_classes(class_counts, n_prime, present_in_train):
    """Largest-remainder allocation of n' nodes over classes.

    Guarantees the counts sum to n', deviate from exact proportionality by at
    most 1 before the minimum-1 adjustment, and give at least one node to
    every class present in the training data.
    """
    class_counts = np.asarray(class_counts, dtype=np.float64)
    total = class_counts.sum()
    c = class_counts.shape[0]
    if n_prime < c:
        raise ValueError(f"n'={n_prime} smaller than class count {c}")
    quota = n_prime * class_counts / total
    counts = np.floor(quota).astype(np.int64)
    rem = quota - counts
    leftover = n_prime - counts.sum()
    # ties break toward the lower class id (stable sort on -remainder)
    order = np.argsort(-rem, kind="stable")
    for k in range(int(leftover)):
        counts[order[k]] += 1
    for cls in np.where(present_in_train & (counts == 0))[0]:
        donor = int(np.argmax(counts))
        counts[donor] -= 1
        counts[cls] += 1
    return counts


def init_condensed(g, ratio, rng):
    """Seed a condensed graph: apportioned labels, real features, empty A'."""
    if not (0 < ratio <= 1):
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    n_prime = int(np.floor(ratio * g.n))
    c = g.num_classes
    if n_prime < c:
        raise ValueError(
            f"budget {n_prime} nodes < {c} classes; increase the ratio"
        )
    class_counts = np.bincount(g.labels, minlength=c)
    train = g.splits.get("train", np.arange(g.n))
    train_labels = g.labels[train]
    present = np.isin(np.arange(c), train_labels)
    counts = apportion_classes(class_counts, n_prime, present)

    feats = np.zeros((n_prime, g.features.shape[1]))
    labels = np.zeros(n_prime, dtype=np.int64)
    pos = 0
    for cls in range(c):
        k = int(counts[cls])
        if k == 0:
            continue
        pool = train[train_labels == cls]
        if pool.size == 0:
            pool = np.where(g.labels == cls)[0]
            log.warning("class %d absent from train split; drawing from all nodes", cls)
        chosen = rng.choice(pool, size=k, replace=pool.size < k)
        feats[pos:pos + k] = g.features[chosen]
        labels[pos:pos + k] = cls
        pos += k
    return CondensedGraph(
        n=n_prime,
        adjacency=np.zeros((n_prime, n_prime)),
        features=feats,
        labels=labels,
    )
