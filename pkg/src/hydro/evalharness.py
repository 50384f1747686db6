"""Downstream evaluation: node classification, link prediction, the
random-selection baseline, and commute-time preservation scoring.

Every result aggregates a fixed number of independent runs; run r of a call
seeded with s draws from default_rng([s, r]), so a result is reproducible
from the artifact plus its recorded seed list alone.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from . import gnn
from .graphcore import CondensedGraph, fmt17, apportion_classes
from .graphcore import Graph
from .spectral import commute_matrix, write_matrix_csv

log = logging.getLogger("hydro.evalharness")

NC_GCN_EPOCHS = 500
LP_HOLDOUT = 0.10


@dataclass
class EvalResult:
    task: str  # "NC" | "LP"
    mean: float
    std: float
    runs: int
    seeds: list
    config_hash: str = ""
    accuracies: list = field(default_factory=list, repr=False)

    def validate(self):
        if self.task not in ("NC", "LP"):
            raise ValueError(f"unknown task {self.task!r}")
        if not (0.0 <= self.mean <= 1.0) or self.std < 0.0:
            raise ValueError("accuracy statistics out of range")
        if len(self.seeds) != self.runs:
            raise ValueError("seed list length != runs")
        if self.accuracies and len(self.accuracies) != self.runs:
            raise ValueError("per-run accuracy count != runs")
        return self


def _run_map(fn, seeds, jobs):
    """Apply fn to each seed pair, optionally across a thread pool.

    Runs are independent and the aggregation is order-preserving, so the
    result is identical for any jobs value.
    """
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    if jobs == 1:
        return [fn(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, seeds))


def _aggregate(task, accs, seeds, config_hash):
    accs = [float(a) for a in accs]
    return EvalResult(
        task=task, mean=float(np.mean(accs)), std=float(np.std(accs)),
        runs=len(accs), seeds=seeds, config_hash=config_hash,
        accuracies=accs,
    ).validate()


def _check_compatible(cg, g):
    if cg.features.shape[1] != g.features.shape[1]:
        raise ValueError(
            f"feature dim {cg.features.shape[1]} != original {g.features.shape[1]}"
        )
    # a Graph used as its own condensed input supervises on its train split,
    # so class coverage is judged on the labels the GCN will actually see
    labels = cg.labels
    splits = getattr(cg, "splits", None)
    if splits is not None:
        if "train" not in splits or len(splits["train"]) == 0:
            raise ValueError("graph has no train split")
        labels = cg.labels[np.asarray(splits["train"], dtype=np.int64)]
    missing = set(range(g.num_classes)) - set(int(x) for x in labels)
    if missing:
        raise ValueError(f"classes absent from condensed graph: {sorted(missing)}")


def _test_split(g):
    test = g.splits.get("test")
    if test is None or len(test) == 0:
        raise ValueError("original graph has no test split")
    return np.asarray(test, dtype=np.int64)


# ---------------------------------------------------------------------------
# node classification
# ---------------------------------------------------------------------------

def _nc_run(cg, g, test, rng):
    model = gnn.gcn_train(cg, epochs=NC_GCN_EPOCHS, rng=rng)
    out = gnn.gcn_infer(model, g)
    return gnn.accuracy(out.preds, g.labels, test)


def eval_nc(cg, g, runs=10, seed=0, config_hash=None, jobs=1):
    """Train a GCN on cg per run; report test-split accuracy on g."""
    _check_compatible(cg, g)
    test = _test_split(g)
    seeds = [[seed, r] for r in range(runs)]
    accs = _run_map(
        lambda s: _nc_run(cg, g, test, np.random.default_rng(s)), seeds, jobs)
    if config_hash is None:
        config_hash = getattr(cg, "config_hash", "") or ""
    return _aggregate("NC", accs, seeds, config_hash)


# ---------------------------------------------------------------------------
# link prediction
# ---------------------------------------------------------------------------

def _edge_list(g):
    a = g.adjacency
    if sp.issparse(a):
        coo = sp.coo_array(a)
        mask = coo.row < coo.col
        return np.stack([coo.row[mask], coo.col[mask]], axis=1)
    iu, ju = np.nonzero(np.triu(np.asarray(a), k=1))
    return np.stack([iu, ju], axis=1)


def _sample_negatives(rng, n, m, edge_set):
    """m distinct node pairs (u<v) that are not edges; rejection sampling."""
    out = []
    taken = set()
    limit = 1000 * m + 1000
    while len(out) < m:
        if limit <= 0:
            raise ValueError("could not sample enough non-edges")
        limit -= 1
        u, v = rng.integers(0, n, size=2)
        if u == v:
            continue
        if u > v:
            u, v = v, u
        key = (int(u), int(v))
        if key in edge_set or key in taken:
            continue
        taken.add(key)
        out.append(key)
    return np.asarray(out, dtype=np.int64)


def _mask_edges(adjacency, pairs):
    """Copy of the adjacency with the given undirected edges removed."""
    if sp.issparse(adjacency):
        a = adjacency.tolil(copy=True)
        for u, v in pairs:
            a[u, v] = 0.0
            a[v, u] = 0.0
        return a.tocsr()
    a = np.array(adjacency, dtype=np.float64, copy=True)
    for u, v in pairs:
        a[u, v] = 0.0
        a[v, u] = 0.0
    return a


def lp_scores(embeddings, pairs):
    """Sigmoid inner-product edge scores; symmetric in the pair order."""
    z = np.asarray(embeddings, dtype=np.float64)
    pairs = np.asarray(pairs, dtype=np.int64)
    return expit(np.sum(z[pairs[:, 0]] * z[pairs[:, 1]], axis=1))


def _lp_accuracy(embeddings, pos_pairs, neg_pairs):
    """Balanced accuracy at threshold 0.5: an edge is predicted iff > 0.5."""
    hits = np.sum(lp_scores(embeddings, pos_pairs) > 0.5)
    hits += np.sum(lp_scores(embeddings, neg_pairs) <= 0.5)
    return hits / (len(pos_pairs) + len(neg_pairs))


def eval_lp(cg, g, runs=10, seed=0, config_hash=None, jobs=1):
    """Train on cg, score held-out original edges against sampled non-edges.

    Per run: 10% of g's edges are held out (and removed from the propagation
    adjacency before embedding), an equal number of non-edges is
    rejection-sampled, and the balanced set is scored by the sigmoid of the
    penultimate-embedding inner product at threshold 0.5.
    """
    _check_compatible(cg, g)
    edges = _edge_list(g)
    m_hold = int(LP_HOLDOUT * len(edges))
    if m_hold < 1:
        raise ValueError(
            f"too few edges for a link-prediction holdout ({len(edges)})"
        )
    edge_set = set((int(u), int(v)) for u, v in edges)
    seeds = [[seed, r] for r in range(runs)]

    def run(s):
        rng = np.random.default_rng(s)
        pos = edges[rng.choice(len(edges), size=m_hold, replace=False)]
        neg = _sample_negatives(rng, g.n, m_hold, edge_set)
        masked = Graph(n=g.n, adjacency=_mask_edges(g.adjacency, pos),
                       features=g.features, labels=g.labels, splits=g.splits)
        model = gnn.gcn_train(cg, epochs=NC_GCN_EPOCHS, rng=rng)
        emb = gnn.gcn_infer(model, masked).embeddings
        return _lp_accuracy(emb, pos, neg)

    accs = _run_map(run, seeds, jobs)
    if config_hash is None:
        config_hash = getattr(cg, "config_hash", "") or ""
    return _aggregate("LP", accs, seeds, config_hash)


# ---------------------------------------------------------------------------
# random-selection baseline
# ---------------------------------------------------------------------------

def _random_selection(g, ratio, rng):
    """Node indices for a random condensed graph: the initializer's budget
    rule (class apportionment, train pool, fallback + replacement only when
    a pool runs short) applied to node selection."""
    if not (0 < ratio <= 1):
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    n_prime = int(np.floor(ratio * g.n))
    c = g.num_classes
    if n_prime < c:
        raise ValueError(f"budget {n_prime} nodes < {c} classes")
    class_counts = np.bincount(g.labels, minlength=c)
    train = g.splits.get("train", np.arange(g.n))
    train_labels = g.labels[train]
    present = np.isin(np.arange(c), train_labels)
    counts = apportion_classes(class_counts, n_prime, present)
    chosen = []
    for cls in range(c):
        k = int(counts[cls])
        if k == 0:
            continue
        pool = train[train_labels == cls]
        if pool.size == 0:
            pool = np.where(g.labels == cls)[0]
            log.warning("class %d absent from train split; selecting from all nodes", cls)
        chosen.append(rng.choice(pool, size=k, replace=pool.size < k))
    return np.concatenate(chosen)


def random_condensed(g, ratio, rng):
    """Induced subgraph on a random class-apportioned train selection."""
    nodes = _random_selection(g, ratio, rng)
    a = g.adjacency
    sub = a[nodes][:, nodes] if sp.issparse(a) else a[np.ix_(nodes, nodes)]
    if sp.issparse(sub):
        sub = sub.toarray()
    return CondensedGraph(
        n=len(nodes), adjacency=np.asarray(sub, dtype=np.float64),
        features=np.asarray(g.features[nodes], dtype=np.float64),
        labels=g.labels[nodes].astype(np.int64),
    ).validate()


def baseline_random(g, ratio, runs=10, seed=0, jobs=1):
    """Random-selection condensation scored with the NC protocol.

    The selection is re-drawn per run, so the spread reflects both selection
    and training noise.
    """
    test = _test_split(g)
    seeds = [[seed, r] for r in range(runs)]

    def run(s):
        rng = np.random.default_rng(s)
        cg = random_condensed(g, ratio, rng)
        _check_compatible(cg, g)
        return _nc_run(cg, g, test, rng)

    accs = _run_map(run, seeds, jobs)
    return _aggregate("NC", accs, seeds, "")


# ---------------------------------------------------------------------------
# commute-time preservation
# ---------------------------------------------------------------------------

@dataclass
class CommuteComparison:
    score: float
    condensed_path: str = ""
    original_path: str = ""


def compare_commute(cg, g, cap=20000.0, out_dir=None):
    """Distributional distance between the two commute-time maps.

    Both matrices are capped and normalized by the cap; the original's
    upper-triangle distribution is matched to the condensed entry count by
    empirical quantiles, and the score is the mean absolute difference of
    the sorted vectors. Zero iff the distributions coincide; disconnected
    pairs saturate at the cap.
    """
    if cap <= 0:
        raise ValueError("cap must be positive")
    m_cg = np.minimum(commute_matrix(cg), cap)
    m_g = np.minimum(commute_matrix(g), cap)
    if m_cg.shape[0] < 2 or m_g.shape[0] < 2:
        raise ValueError("need at least 2 nodes on both sides")
    uc = np.sort(m_cg[np.triu_indices(m_cg.shape[0], k=1)]) / cap
    ug = np.sort(m_g[np.triu_indices(m_g.shape[0], k=1)]) / cap
    if uc.size == ug.size:
        ref = ug  # quantile matching at equal counts is the identity
    else:
        ref = np.quantile(ug, np.linspace(0.0, 1.0, uc.size))
    score = float(np.mean(np.abs(uc - ref)))

    cpath = opath = ""
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        cpath = os.path.join(out_dir, "condensed_commute.csv")
        opath = os.path.join(out_dir, "original_commute.csv")
        write_matrix_csv(m_cg, cpath)
        write_matrix_csv(m_g, opath)
    return CommuteComparison(score=score, condensed_path=cpath,
                             original_path=opath)


# ---------------------------------------------------------------------------
# results file
# ---------------------------------------------------------------------------

def _result_json(r):
    seeds = ",".join("[%d,%d]" % (s[0], s[1]) for s in r.seeds)
    return (
        '{"task":"%s","mean":%s,"std":%s,"runs":%d,"seeds":[%s],'
        '"config_hash":"%s"}'
        % (r.task, fmt17(r.mean), fmt17(r.std), r.runs, seeds, r.config_hash)
    )


def save_results(results, path):
    """results.json: one block per task, canonical 17-digit floats."""
    blocks = []
    seen = set()
    for r in results:
        r.validate()
        key = r.task.lower()
        if key in seen:
            raise ValueError(f"duplicate task block {key}")
        seen.add(key)
        blocks.append('"%s":%s' % (key, _result_json(r)))
    with open(path, "w") as fh:
        fh.write("{" + ",".join(blocks) + "}\n")
