"""Riemannian optimizer, matching losses, and the distillation loop."""

import json

import numpy as np
import pytest

import hydro.adgrad as ad
import hydro.distill as ds
import hydro.hypernet as hn
import hydro.manifold as mf
from hydro.distill import (
    DistillConfig,
    RiemannianOpt,
    TrainingDivergence,
    distill,
    match_loss,
    riemannian_step,
    total_loss,
)
from hydro.graphcore import Graph, init_condensed

from conftest import fd_grad, rel_err


def toy_graph(n=30, d=4, classes=3, seed=7):
    """Assortative labeled graph with train/val/test splits."""
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
    splits = {
        "train": np.asarray(train, dtype=np.int64),
        "val": np.asarray(val, dtype=np.int64),
        "test": np.asarray(test, dtype=np.int64),
    }
    return Graph(n=n, adjacency=a, features=feats, labels=labels,
                 splits=splits).validate()


def quick_cfg(**over):
    base = dict(ratio=0.2, epochs=2, outer=1, inner=1, sample_size=16,
                layers=2, hidden=8, seed=3)
    base.update(over)
    return DistillConfig(**base)


# ---------------------------------------------------------------------------
# Riemannian SGD
# ---------------------------------------------------------------------------

class TestRiemannianOpt:
    C = 0.01

    def test_origin_step_matches_exp0(self):
        rng = np.random.default_rng(0)
        p = np.zeros((5, 3))
        g = rng.normal(size=(5, 3))
        opt = RiemannianOpt(self.C, lr=0.1)
        p_new = opt.step("x", p, g)
        # conformal factor at the origin is 1/4
        expected = mf.exp0(-0.1 * g / 4.0, self.C)
        np.testing.assert_allclose(p_new, expected, rtol=0, atol=1e-15)

    def test_zero_gradient_is_fixed_point(self):
        rng = np.random.default_rng(1)
        p = rng.normal(size=(4, 3)) * 0.5
        opt = RiemannianOpt(self.C, lr=0.1, momentum=0.9)
        p_new = opt.step("x", p, np.zeros_like(p))
        assert np.array_equal(p_new, p)

    def test_step_displacement_matches_log_map(self):
        rng = np.random.default_rng(2)
        p = rng.normal(size=(6, 3)) * 0.4
        g = rng.normal(size=(6, 3))
        lr = 0.05
        opt = RiemannianOpt(self.C, lr=lr)
        p_new = opt.step("x", p, g)
        m = (1.0 - self.C * mf._sqnorm(p)) ** 2 / 4.0 * g
        back = mf.log_map(p, p_new, self.C)
        assert np.max(np.abs(back - (-lr * m))) < 1e-9

    def test_buffer_rebased_isometrically(self):
        rng = np.random.default_rng(3)
        p = rng.normal(size=(6, 3)) * 0.4
        g = rng.normal(size=(6, 3))
        opt = RiemannianOpt(self.C, lr=0.05, momentum=0.9)
        p_new = opt.step("x", p, g)
        m = (1.0 - self.C * mf._sqnorm(p)) ** 2 / 4.0 * g
        buf = opt.buffers["x"]
        # parallel transport preserves the Riemannian norm
        norm_old = mf.lambda_factor(p, self.C) ** 2 * mf._sqnorm(m)
        norm_new = mf.lambda_factor(p_new, self.C) ** 2 * mf._sqnorm(buf)
        np.testing.assert_allclose(norm_new, norm_old, rtol=1e-9)

    def test_momentum_replay_three_steps(self):
        rng = np.random.default_rng(4)
        c, lr, mu, wd = self.C, 0.05, 0.6, 1e-3
        p_ref = rng.normal(size=(5, 3)) * 0.3
        grads = [rng.normal(size=(5, 3)) for _ in range(3)]
        opt = RiemannianOpt(c, lr=lr, momentum=mu, weight_decay=wd)
        p_opt = p_ref.copy()
        m_ref = None
        for g in grads:
            p_opt = opt.step("x", p_opt, g)
            rg = (1.0 - c * mf._sqnorm(p_ref)) ** 2 / 4.0 * (
                g + wd * mf.log0(p_ref, c))
            m_ref = rg if m_ref is None else mu * m_ref + rg
            p_next = mf.exp_map(p_ref, -lr * m_ref, c)
            m_ref = mf.parallel_transport(p_ref, p_next, m_ref, c)
            p_ref = p_next
            np.testing.assert_allclose(p_opt, p_ref, rtol=1e-12, atol=0)

    def test_weight_decay_pulls_toward_origin(self):
        p = np.full((1, 3), 0.4)
        opt = RiemannianOpt(self.C, lr=0.1, weight_decay=0.5)
        p_new = opt.step("x", p, np.zeros_like(p))
        assert np.linalg.norm(p_new) < np.linalg.norm(p)

    def test_nonfinite_gradient_raises(self):
        opt = RiemannianOpt(self.C, lr=0.1)
        g = np.zeros((2, 2))
        g[0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            opt.step("x", np.zeros((2, 2)), g)

    def test_one_dimensional_bias(self):
        rng = np.random.default_rng(5)
        b = rng.normal(size=3) * 0.2
        opt = RiemannianOpt(self.C, lr=0.1, momentum=0.5)
        for _ in range(20):
            b = opt.step("b", b, rng.normal(size=3))
        assert b.shape == (3,)
        assert np.sum(b * b) < (1.0 - mf.EPS_BOUNDARY) / self.C

    def test_functional_wrapper_delegates(self):
        rng = np.random.default_rng(6)
        p = rng.normal(size=(3, 2)) * 0.3
        g = rng.normal(size=(3, 2))
        s1 = RiemannianOpt(self.C, lr=0.1, momentum=0.4)
        s2 = RiemannianOpt(self.C, lr=0.1, momentum=0.4)
        np.testing.assert_array_equal(
            riemannian_step(p, g, s1, key="k"), s2.step("k", p, g))

    def test_separate_keys_separate_buffers(self):
        rng = np.random.default_rng(7)
        opt = RiemannianOpt(self.C, lr=0.1, momentum=0.9)
        p = rng.normal(size=(2, 2)) * 0.1
        opt.step("a", p, np.ones((2, 2)))
        opt.step("b", p, np.ones((2, 2)))
        assert set(opt.buffers) == {"a", "b"}


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

class TestMatchLoss:
    def leaf(self, arr):
        return ad.Tape().leaf(np.asarray(arr, dtype=np.float64))

    def test_identical_gradients_zero(self):
        rng = np.random.default_rng(0)
        g = rng.normal(size=(5, 4))
        loss = match_loss([self.leaf(g)], [g])
        assert abs(loss.value) < 1e-12

    def test_orthogonal_columns_one_each(self):
        gs = self.leaf([[1.0, 0.0], [0.0, 1.0]])
        gr = np.array([[0.0, 1.0], [1.0, 0.0]])
        loss = match_loss([gs], [gr])
        assert abs(loss.value - 2.0) < 1e-12

    def test_opposite_columns_two_each(self):
        rng = np.random.default_rng(1)
        g = rng.normal(size=(6, 3))
        loss = match_loss([self.leaf(g)], [-g])
        assert abs(loss.value - 6.0) < 1e-12

    def test_column_rescale_invariance(self):
        rng = np.random.default_rng(2)
        g = rng.normal(size=(5, 3))
        scales = np.array([0.2, 3.0, 11.0])
        base = match_loss([self.leaf(g * 2.0)], [g]).value
        scaled = match_loss([self.leaf(g * 2.0)], [g * scales]).value
        assert abs(base - scaled) < 1e-12

    def test_multi_layer_sum(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(4, 2)), rng.normal(size=(3, 5))
        ar, br = rng.normal(size=(4, 2)), rng.normal(size=(3, 5))
        tape = ad.Tape()
        va, vb = tape.leaf(a), tape.leaf(b)
        combined = match_loss([va, vb], [ar, br]).value
        separate = match_loss([self.leaf(a)], [ar]).value \
            + match_loss([self.leaf(b)], [br]).value
        assert abs(combined - separate) < 1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            match_loss([self.leaf(np.ones((3, 2)))], [np.ones((2, 3))])
        with pytest.raises(ValueError, match="layer count"):
            match_loss([self.leaf(np.ones((2, 2)))], [np.ones((2, 2))] * 2)
        with pytest.raises(ValueError, match="no gradient"):
            match_loss([], [])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(4, 3))
        ar = rng.normal(size=(4, 3))
        br = rng.normal(size=(4, 3))

        def f(v):
            tape = ad.Tape()
            lv = tape.leaf(v)
            return match_loss([lv, lv], [ar, br]).value

        tape = ad.Tape()
        lv = tape.leaf(x)
        loss = match_loss([lv, lv], [ar, br])
        analytic = ad.backward(loss)[lv]
        assert rel_err(analytic, fd_grad(f, x)) < 1e-5


class TestTotalLoss:
    def test_reference_combination(self):
        assert total_loss(1.0, 0.5, 2.0, 0.1) == 1.7

    def test_beta_zero_drops_regularizer(self):
        assert total_loss(0.3, 0.2, 100.0, 0.0) == 0.5

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            total_loss(-1.0, 0.0, 0.0, 0.1)
        with pytest.raises(ValueError):
            total_loss(0.0, np.nan, 0.0, 0.1)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

class TestDistillConfig:
    def test_defaults_valid(self):
        DistillConfig().validate()

    @pytest.mark.parametrize("field,value", [
        ("ratio", 0.0), ("ratio", 1.5), ("epochs", 0), ("outer", 0),
        ("inner", 0), ("lr_feat", -0.1), ("beta", -1.0), ("momentum", -0.5),
        ("curvature", 0.0), ("sample_size", 1), ("gap_weight", -2.0),
        ("sgc_k", -1),
    ])
    def test_rejects_bad_field(self, field, value):
        with pytest.raises(ValueError):
            DistillConfig(**{field: value}).validate()


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

class TestDistill:
    def test_history_schema_and_probe_cadence(self, monkeypatch):
        monkeypatch.setattr(ds, "PROBE_EVERY", 2)
        monkeypatch.setattr(ds, "PROBE_GCN_EPOCHS", 30)
        g = toy_graph()
        res = distill(g, quick_cfg(epochs=4))
        assert len(res.history) == 4
        keys = {"epoch", "L_gm", "L_rw_norm", "L_reg", "L_total",
                "g_syn", "g_sub", "probe_val_acc"}
        for i, row in enumerate(res.history, start=1):
            assert set(row) == keys
            assert row["epoch"] == i
            for k in ("L_gm", "L_rw_norm", "L_reg", "L_total"):
                assert np.isfinite(row[k]) and row[k] >= 0.0
            assert 0.0 <= row["g_syn"] <= 1.0
            assert 0.0 <= row["g_sub"] <= 1.0
            if i % 2 == 0:
                assert row["probe_val_acc"] is not None
            else:
                assert row["probe_val_acc"] is None

    def test_deterministic_rerun(self, monkeypatch):
        monkeypatch.setattr(ds, "PROBE_GCN_EPOCHS", 30)
        g = toy_graph()
        r1 = distill(g, quick_cfg())
        r2 = distill(g, quick_cfg())
        np.testing.assert_array_equal(r1.condensed.adjacency,
                                      r2.condensed.adjacency)
        np.testing.assert_array_equal(r1.condensed.features,
                                      r2.condensed.features)
        np.testing.assert_array_equal(r1.condensed.labels, r2.condensed.labels)
        assert r1.history == r2.history
        assert r1.best_epoch == r2.best_epoch

    def test_zero_learning_rates_keep_init_export(self, monkeypatch):
        monkeypatch.setattr(ds, "PROBE_GCN_EPOCHS", 30)
        g = toy_graph()
        cfg = quick_cfg(lr_feat=0.0, lr_struct=0.0, momentum=0.0)
        res = distill(g, cfg)

        rng = np.random.default_rng(cfg.seed)
        cg0 = init_condensed(g, cfg.ratio, rng)
        x_ball = mf.exp0(cg0.features, cfg.curvature)
        hcfg = hn.HyperNetConfig(layers=cfg.layers, hidden=cfg.hidden,
                                 curvature=cfg.curvature, seed=cfg.seed)
        params = hn.init_params(g.features.shape[1], hcfg)
        np.testing.assert_array_equal(res.condensed.adjacency,
                                      hn.forward_literal(params, x_ball))
        np.testing.assert_array_equal(res.condensed.features,
                                      mf.log0(x_ball, cfg.curvature))
        np.testing.assert_array_equal(res.condensed.labels, cg0.labels)

    def test_condensed_artifact_contract(self, monkeypatch):
        monkeypatch.setattr(ds, "PROBE_GCN_EPOCHS", 30)
        g = toy_graph()
        res = distill(g, quick_cfg(lr_feat=0.3, lr_struct=0.05, epochs=3))
        cg = res.condensed
        assert cg.n == 6  # floor(0.2 * 30)
        assert cg.features.shape == (6, 4)
        cg.validate()
        assert np.array_equal(cg.adjacency, cg.adjacency.T)
        assert np.all(np.diagonal(cg.adjacency) == 0.0)
        assert np.all((cg.adjacency >= 0.0) & (cg.adjacency <= 1.0))
        assert np.all(np.isfinite(cg.features))
        # labels keep the class-sorted block layout of the initializer
        assert np.array_equal(cg.labels, np.sort(cg.labels))
        assert 0 <= res.best_epoch <= 3
        assert 0.0 <= res.best_val_acc <= 1.0

    def test_jsonl_log_round_trips(self, tmp_path, monkeypatch):
        monkeypatch.setattr(ds, "PROBE_EVERY", 2)
        monkeypatch.setattr(ds, "PROBE_GCN_EPOCHS", 30)
        g = toy_graph()
        path = tmp_path / "train.jsonl"
        res = distill(g, quick_cfg(epochs=3), log_path=str(path))
        lines = path.read_text().splitlines()
        assert len(lines) == 3
        for line, row in zip(lines, res.history):
            doc = json.loads(line)
            assert doc == row

    def test_divergence_surfaces_checkpoint(self, monkeypatch):
        import hydro.spectral
        monkeypatch.setattr(ds, "PROBE_GCN_EPOCHS", 30)
        real = hydro.spectral.taped_synthetic_gap
        calls = {"n": 0}

        def poisoned(a_var):
            calls["n"] += 1
            out = real(a_var)
            if calls["n"] >= 3:
                out = ad.scale(out, float("nan"))
            return out

        monkeypatch.setattr(hydro.spectral, "taped_synthetic_gap", poisoned)
        g = toy_graph()
        with pytest.raises(TrainingDivergence) as exc_info:
            distill(g, quick_cfg(epochs=6))
        exc = exc_info.value
        assert exc.epoch == 3
        exc.checkpoint.validate()
        assert exc.checkpoint.n == 6

    def test_ablation_weights_zero_out_terms(self, monkeypatch):
        monkeypatch.setattr(ds, "PROBE_GCN_EPOCHS", 30)
        g = toy_graph()
        res = distill(g, quick_cfg(beta=0.0, gap_weight=0.0))
        for row in res.history:
            assert row["L_rw_norm"] == 0.0
            assert row["L_total"] == row["L_gm"]

    def test_logged_total_matches_combiner(self, monkeypatch):
        monkeypatch.setattr(ds, "PROBE_GCN_EPOCHS", 30)
        g = toy_graph()
        cfg = quick_cfg()
        res = distill(g, cfg)
        for row in res.history:
            assert row["L_total"] == total_loss(
                row["L_gm"], row["L_rw_norm"], row["L_reg"], cfg.beta)

    def test_best_epoch_tracks_probe_maximum(self, monkeypatch):
        monkeypatch.setattr(ds, "PROBE_EVERY", 1)
        monkeypatch.setattr(ds, "PROBE_GCN_EPOCHS", 30)
        g = toy_graph()
        res = distill(g, quick_cfg(epochs=3, lr_feat=0.3))
        probes = [row["probe_val_acc"] for row in res.history]
        assert all(p is not None for p in probes)
        assert res.best_val_acc >= max(probes)

    def test_missing_val_split_rejected(self):
        g = toy_graph()
        g.splits.pop("val")
        with pytest.raises(ValueError, match="validation"):
            distill(g, quick_cfg())

    def test_empty_train_split_rejected(self):
        g = toy_graph()
        g.splits["train"] = np.asarray([], dtype=np.int64)
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="train"):
            ds._sample_with_train(g, 5, rng)

    def test_tiny_train_split_eventually_sampled(self):
        g = toy_graph()
        g.splits["train"] = np.asarray([0], dtype=np.int64)
        rng = np.random.default_rng(0)
        sub = ds._sample_with_train(g, 5, rng)
        assert len(sub.splits["train"]) == 1
