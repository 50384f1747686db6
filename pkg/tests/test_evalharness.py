"""Evaluation protocols: NC, LP, random baseline, commute comparison."""

import json

import numpy as np
import pytest
import scipy.sparse as sp

import hydro.evalharness as ev
from hydro.evalharness import (
    CommuteComparison,
    EvalResult,
    baseline_random,
    compare_commute,
    eval_lp,
    eval_nc,
    lp_scores,
    random_condensed,
    save_results,
)
from hydro.graphcore import CondensedGraph, Graph


def toy_graph(n=30, d=4, classes=3, seed=7):
    rng = np.random.default_rng(seed)
    labels = np.sort(np.arange(n) % classes)
    protos = rng.normal(size=(classes, d)) * 2.0
    feats = protos[labels] + 0.3 * rng.normal(size=(n, d))
    a = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            p = 0.6 if labels[i] == labels[j] else 0.08
            if rng.random() < p:
                a[i, j] = a[j, i] = 1.0
    train, val, test = [], [], []
    for cls in range(classes):
        members = np.where(labels == cls)[0]
        train.extend(members[:4])
        val.extend(members[4:6])
        test.extend(members[6:])
    splits = {k: np.asarray(v, dtype=np.int64)
              for k, v in (("train", train), ("val", val), ("test", test))}
    return Graph(n=n, adjacency=a, features=feats, labels=labels,
                 splits=splits).validate()


def toy_condensed(g, per_class=2):
    """Prototype-feature condensed graph with clean intra-class edges."""
    classes = g.num_classes
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    feats = np.zeros((n, g.features.shape[1]))
    for cls in range(classes):
        members = np.where(g.labels == cls)[0]
        proto = g.features[members].mean(axis=0)
        feats[labels == cls] = proto
    a = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if labels[i] == labels[j]:
                a[i, j] = a[j, i] = 0.9
    return CondensedGraph(n=n, adjacency=a, features=feats,
                          labels=labels).validate()


def path_graph(n):
    a = np.zeros((n, n))
    for i in range(n - 1):
        a[i, i + 1] = a[i + 1, i] = 1.0
    return a


def graph_of(a, d=1):
    n = a.shape[0]
    return Graph(n=n, adjacency=a, features=np.zeros((n, d)),
                 labels=np.zeros(n, dtype=np.int64),
                 splits={"train": np.arange(n, dtype=np.int64)})


def condensed_of(a, d=1):
    n = a.shape[0]
    return CondensedGraph(n=n, adjacency=np.asarray(a, dtype=np.float64),
                          features=np.zeros((n, d)),
                          labels=np.zeros(n, dtype=np.int64)).validate()


# ---------------------------------------------------------------------------
# result container
# ---------------------------------------------------------------------------

class TestEvalResult:
    def test_validate_ranges(self):
        EvalResult(task="NC", mean=0.5, std=0.1, runs=2,
                   seeds=[[0, 0], [0, 1]]).validate()
        with pytest.raises(ValueError):
            EvalResult(task="NC", mean=1.5, std=0.1, runs=1,
                       seeds=[[0, 0]]).validate()
        with pytest.raises(ValueError):
            EvalResult(task="XX", mean=0.5, std=0.1, runs=1,
                       seeds=[[0, 0]]).validate()

    def test_seed_list_must_match_runs(self):
        with pytest.raises(ValueError, match="seed list"):
            EvalResult(task="LP", mean=0.5, std=0.0, runs=3,
                       seeds=[[0, 0]]).validate()


# ---------------------------------------------------------------------------
# node classification
# ---------------------------------------------------------------------------

class TestEvalNc:
    def test_statistics_over_stated_runs(self):
        g = toy_graph()
        res = eval_nc(toy_condensed(g), g, runs=3, seed=1)
        assert res.task == "NC"
        assert res.runs == 3
        assert res.seeds == [[1, 0], [1, 1], [1, 2]]
        assert len(res.accuracies) == 3
        assert res.mean == np.mean(res.accuracies)
        assert res.std == np.std(res.accuracies)

    def test_deterministic_given_seed(self):
        g = toy_graph()
        cg = toy_condensed(g)
        r1 = eval_nc(cg, g, runs=2, seed=9)
        r2 = eval_nc(cg, g, runs=2, seed=9)
        assert r1.accuracies == r2.accuracies
        assert (r1.mean, r1.std) == (r2.mean, r2.std)

    def test_separable_condensed_graph_scores_high(self):
        g = toy_graph()
        res = eval_nc(toy_condensed(g), g, runs=2, seed=0)
        assert res.mean >= 0.8

    def test_whole_graph_as_condensed_input(self):
        g = toy_graph()
        res = eval_nc(g, g, runs=1, seed=0)
        assert 0.0 <= res.mean <= 1.0
        # supervised on its own train split only
        assert res.runs == 1

    def test_rejects_missing_class(self):
        g = toy_graph()
        cg = toy_condensed(g)
        cg.labels = np.where(cg.labels == 2, 0, cg.labels)
        with pytest.raises(ValueError, match=r"absent.*\[2\]"):
            eval_nc(cg, g, runs=1)

    def test_rejects_feature_dim_mismatch(self):
        g = toy_graph()
        cg = toy_condensed(g)
        cg.features = cg.features[:, :2]
        with pytest.raises(ValueError, match="feature dim"):
            eval_nc(cg, g, runs=1)

    def test_requires_test_split(self):
        g = toy_graph()
        g.splits.pop("test")
        with pytest.raises(ValueError, match="test split"):
            eval_nc(toy_condensed(g), g, runs=1)

    def test_config_hash_propagates(self):
        g = toy_graph()
        cg = toy_condensed(g)
        cg.config_hash = "abc123"
        assert eval_nc(cg, g, runs=1).config_hash == "abc123"
        assert eval_nc(cg, g, runs=1, config_hash="xyz").config_hash == "xyz"

    def test_thread_pool_matches_sequential(self):
        g = toy_graph()
        cg = toy_condensed(g)
        seq = eval_nc(cg, g, runs=3, seed=6, jobs=1)
        par = eval_nc(cg, g, runs=3, seed=6, jobs=3)
        assert seq.accuracies == par.accuracies
        with pytest.raises(ValueError, match="jobs"):
            eval_nc(cg, g, runs=1, jobs=0)


# ---------------------------------------------------------------------------
# link prediction
# ---------------------------------------------------------------------------

class TestEvalLp:
    def test_deterministic_and_balanced(self):
        g = toy_graph()
        cg = toy_condensed(g)
        r1 = eval_lp(cg, g, runs=2, seed=4)
        r2 = eval_lp(cg, g, runs=2, seed=4)
        assert r1.task == "LP"
        assert r1.accuracies == r2.accuracies
        assert all(0.0 <= a <= 1.0 for a in r1.accuracies)

    def test_too_few_edges_rejected(self):
        a = path_graph(6)  # 5 edges; 10% holdout floors to zero
        g = Graph(n=6, adjacency=a, features=np.zeros((6, 4)),
                  labels=np.zeros(6, dtype=np.int64),
                  splits={"train": np.arange(6, dtype=np.int64)})
        cg = toy_condensed(toy_graph())
        with pytest.raises(ValueError, match="too few edges"):
            eval_lp(cg, g, runs=1)

    def test_negatives_are_never_edges(self):
        g = toy_graph()
        edges = ev._edge_list(g)
        edge_set = set((int(u), int(v)) for u, v in edges)
        rng = np.random.default_rng(0)
        neg = ev._sample_negatives(rng, g.n, 20, edge_set)
        assert len(neg) == 20
        keys = set(map(tuple, neg.tolist()))
        assert len(keys) == 20  # distinct
        assert not (keys & edge_set)
        assert np.all(neg[:, 0] < neg[:, 1])

    def test_negative_sampling_exhaustion(self):
        a = 1.0 - np.eye(4)  # complete graph: no non-edges exist
        g = graph_of(a)
        edges = ev._edge_list(g)
        edge_set = set((int(u), int(v)) for u, v in edges)
        with pytest.raises(ValueError, match="non-edges"):
            ev._sample_negatives(np.random.default_rng(0), 4, 1, edge_set)

    def test_held_out_edges_removed_from_propagation(self):
        g = toy_graph()
        pairs = ev._edge_list(g)[:3]
        masked = ev._mask_edges(g.adjacency, pairs)
        for u, v in pairs:
            assert masked[u, v] == 0.0 and masked[v, u] == 0.0
            assert g.adjacency[u, v] == 1.0  # input untouched
        diff = np.sum(g.adjacency != masked)
        assert diff == 2 * len(pairs)

    def test_mask_edges_sparse_matches_dense(self):
        g = toy_graph()
        pairs = ev._edge_list(g)[:4]
        dense = ev._mask_edges(g.adjacency, pairs)
        sparse = ev._mask_edges(sp.csr_array(g.adjacency), pairs)
        np.testing.assert_array_equal(sparse.toarray(), dense)

    def test_scores_symmetric_in_pair_order(self):
        rng = np.random.default_rng(1)
        emb = rng.normal(size=(8, 5))
        s1 = lp_scores(emb, [(2, 6)])
        s2 = lp_scores(emb, [(6, 2)])
        assert s1[0] == s2[0]

    def test_threshold_semantics(self):
        emb = np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
        assert ev._lp_accuracy(emb, [(0, 1)], [(0, 2)]) == 1.0
        # a score of exactly 0.5 does not count as a predicted edge
        zero = np.zeros((3, 2))
        assert ev._lp_accuracy(zero, [(0, 1)], [(0, 2)]) == 0.5

    def test_edge_list_sparse_matches_dense(self):
        g = toy_graph()
        dense = ev._edge_list(g)
        g_sp = Graph(n=g.n, adjacency=sp.csr_array(g.adjacency),
                     features=g.features, labels=g.labels, splits=g.splits)
        sparse = ev._edge_list(g_sp)
        assert set(map(tuple, dense.tolist())) == set(map(tuple, sparse.tolist()))


# ---------------------------------------------------------------------------
# random-selection baseline
# ---------------------------------------------------------------------------

class TestBaselineRandom:
    def test_selection_respects_apportionment_and_train_pool(self):
        g = toy_graph()
        rng = np.random.default_rng(0)
        nodes = ev._random_selection(g, 0.2, rng)
        assert len(nodes) == 6
        counts = np.bincount(g.labels[nodes], minlength=3)
        assert counts.tolist() == [2, 2, 2]
        assert np.all(np.isin(nodes, g.splits["train"]))

    def test_selection_varies_across_run_seeds(self):
        g = toy_graph()
        n1 = ev._random_selection(g, 0.2, np.random.default_rng([3, 0]))
        n2 = ev._random_selection(g, 0.2, np.random.default_rng([3, 1]))
        assert sorted(n1.tolist()) != sorted(n2.tolist())

    def test_condensed_graph_is_induced_subgraph(self):
        g = toy_graph()
        rng = np.random.default_rng(5)
        nodes = ev._random_selection(g, 0.2, rng)
        cg = random_condensed(g, 0.2, np.random.default_rng(5))
        np.testing.assert_array_equal(
            cg.adjacency, g.adjacency[np.ix_(nodes, nodes)])
        np.testing.assert_array_equal(cg.features, g.features[nodes])
        np.testing.assert_array_equal(cg.labels, g.labels[nodes])
        assert np.array_equal(cg.labels, np.sort(cg.labels))

    def test_full_ratio_draws_with_replacement_from_train(self):
        g = toy_graph()
        cg = random_condensed(g, 1.0, np.random.default_rng(0))
        assert cg.n == g.n
        cg.validate()

    def test_deterministic_result(self):
        g = toy_graph()
        r1 = baseline_random(g, 0.2, runs=2, seed=2)
        r2 = baseline_random(g, 0.2, runs=2, seed=2)
        assert r1.accuracies == r2.accuracies
        assert r1.task == "NC"
        assert 0.0 <= r1.mean <= 1.0

    def test_bad_ratio_rejected(self):
        g = toy_graph()
        with pytest.raises(ValueError, match="ratio"):
            baseline_random(g, 0.0, runs=1)
        with pytest.raises(ValueError, match="budget"):
            baseline_random(g, 0.07, runs=1)  # floor(2.1) = 2 < 3 classes


# ---------------------------------------------------------------------------
# commute comparison
# ---------------------------------------------------------------------------

class TestCompareCommute:
    CAP = 20000.0

    def test_identical_graphs_score_zero(self):
        g = toy_graph()
        cg = condensed_of(g.adjacency, d=g.features.shape[1])
        rep = compare_commute(cg, g, cap=self.CAP)
        assert rep.score == 0.0

    def test_triangle_vs_path_oracle(self):
        # condensed K3: all commute times 4; original P3: {4, 4, 8}
        k3 = 1.0 - np.eye(3)
        rep = compare_commute(condensed_of(k3), graph_of(path_graph(3)),
                              cap=self.CAP)
        expected = (0.0 + 0.0 + 4.0) / 3.0 / self.CAP
        assert rep.score == pytest.approx(expected, rel=1e-12)

    def test_quantile_matching_across_sizes(self):
        # K3 (3 pair values, all 4) vs P4 (6 values: 6,6,6,12,12,18);
        # quantiles of the original at [0, 1/2, 1] are [6, 9, 18]
        k3 = 1.0 - np.eye(3)
        rep = compare_commute(condensed_of(k3), graph_of(path_graph(4)),
                              cap=self.CAP)
        expected = (2.0 + 5.0 + 14.0) / 3.0 / self.CAP
        assert rep.score == pytest.approx(expected, rel=1e-12)

    def test_empty_condensed_graph_is_maximal(self):
        g = toy_graph()
        empty = condensed_of(np.zeros((4, 4)), d=g.features.shape[1])
        rep = compare_commute(empty, g, cap=self.CAP)
        assert rep.score > 0.99
        assert rep.score <= 1.0

    def test_heatmap_export(self, tmp_path):
        from hydro.spectral import commute_matrix, read_matrix_csv
        g = toy_graph()
        cg = condensed_of(path_graph(4))
        rep = compare_commute(cg, g, cap=50.0, out_dir=str(tmp_path))
        got = read_matrix_csv(rep.condensed_path)
        np.testing.assert_array_equal(
            got, np.minimum(commute_matrix(cg), 50.0))
        orig = read_matrix_csv(rep.original_path)
        assert orig.shape == (g.n, g.n)

    def test_bad_cap_rejected(self):
        g = toy_graph()
        with pytest.raises(ValueError, match="cap"):
            compare_commute(condensed_of(path_graph(3)), g, cap=0.0)

    def test_disconnected_original_saturates(self):
        a = np.zeros((4, 4))
        a[0, 1] = a[1, 0] = 1.0
        a[2, 3] = a[3, 2] = 1.0
        rep = compare_commute(condensed_of(path_graph(3)), graph_of(a),
                              cap=10.0)
        assert np.isfinite(rep.score)


# ---------------------------------------------------------------------------
# results file
# ---------------------------------------------------------------------------

class TestResultsFile:
    def make(self, task="NC"):
        return EvalResult(task=task, mean=1 / 3, std=0.01, runs=2,
                          seeds=[[7, 0], [7, 1]], config_hash="deadbeef")

    def test_single_block(self, tmp_path):
        path = tmp_path / "results.json"
        save_results([self.make()], path)
        doc = json.loads(path.read_text())
        assert set(doc) == {"nc"}
        block = doc["nc"]
        assert set(block) == {"task", "mean", "std", "runs", "seeds",
                              "config_hash"}
        assert block["mean"] == 1 / 3
        assert block["seeds"] == [[7, 0], [7, 1]]
        assert block["config_hash"] == "deadbeef"

    def test_both_blocks(self, tmp_path):
        path = tmp_path / "results.json"
        save_results([self.make("NC"), self.make("LP")], path)
        doc = json.loads(path.read_text())
        assert set(doc) == {"nc", "lp"}

    def test_duplicate_task_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="duplicate"):
            save_results([self.make(), self.make()], tmp_path / "r.json")

    def test_byte_deterministic(self, tmp_path):
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_results([self.make("NC"), self.make("LP")], p1)
        save_results([self.make("NC"), self.make("LP")], p2)
        assert p1.read_bytes() == p2.read_bytes()
