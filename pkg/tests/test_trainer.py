import math

import numpy as np
import pytest
from scipy import stats

from egorec.config import TrainConfig
from egorec.dataset import from_lists
from egorec.experiments import DEFAULT_GRID, ablate, enumerate_grid, grid_search
from egorec.synthetic import planted_preferences
from egorec.trainer import (AdamState, NegativeSampler, TrainingError, adam_step, fit,
                            init_parameters, load_checkpoint, save_checkpoint, xavier_uniform)

FAST = TrainConfig(lr=1e-2, dim=8, layers=2, knn_k=3, batch_size=64, max_epochs=4, patience=10,
                   seed=5)


@pytest.fixture(scope="module")
def planted():
    return planted_preferences(n_users=30, n_items=40, n_groups=4, seed=3)


class TestXavier:
    def test_bound_and_moments(self):
        w = xavier_uniform(np.random.default_rng(0), 300, 200)
        bound = math.sqrt(6 / 500)
        assert np.abs(w).max() <= bound
        assert abs(w.mean()) < 0.01 * bound
        # variance of U(-b, b) is b^2 / 3 = 2 / (fan_in + fan_out)
        assert w.var() == pytest.approx(2 / 500, rel=0.02)

    def test_deterministic(self):
        a = init_parameters(5, 7, 3, seed=11)
        b = init_parameters(5, 7, 3, seed=11)
        for k, t in a.tensors().items():
            np.testing.assert_array_equal(t, b.tensors()[k])
        c = init_parameters(5, 7, 3, seed=12)
        assert not np.array_equal(a.user_embed["v"], c.user_embed["v"])

    def test_modality_weights_start_equal(self):
        p = init_parameters(2, 2, 2)
        np.testing.assert_array_equal(p.alpha, [0.5, 0.5])
        np.testing.assert_array_equal(p.beta, [0.5, 0.5])


class TestSampler:
    def test_forced_negative(self):
        ds = from_lists([[0, 1, 2, 3], [4]], num_items=5)
        batch = NegativeSampler(ds).sample(500, np.random.default_rng(0))
        assert np.all(batch.neg[batch.users == 0] == 4)

    def test_never_samples_train_items(self, planted):
        ds, _ = planted
        batch = NegativeSampler(ds).sample(5000, np.random.default_rng(1))
        for u, p, n in zip(batch.users, batch.pos, batch.neg):
            assert p in ds.train_sets[u] and n not in ds.train_sets[u]

    def test_positives_uniform_over_interactions(self, planted):
        ds, _ = planted
        sampler = NegativeSampler(ds)
        batch = sampler.sample(60_000, np.random.default_rng(2))
        keys = batch.users * ds.num_items + batch.pos
        _, counts = np.unique(keys, return_counts=True)
        assert len(counts) == len(sampler.pairs)
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_negatives_uniform_over_complement(self):
        ds = from_lists([[0, 1], [2, 3, 4, 5, 6, 7, 8, 9]], num_items=10)
        batch = NegativeSampler(ds).sample(40_000, np.random.default_rng(3))
        neg = batch.neg[batch.users == 0]
        counts = np.bincount(neg, minlength=10)
        assert counts[:2].sum() == 0
        assert stats.chisquare(counts[2:]).pvalue > 1e-3

    def test_user_with_every_item_is_skipped(self):
        ds = from_lists([[0, 1, 2], [0]], num_items=3)
        batch = NegativeSampler(ds).sample(100, np.random.default_rng(0))
        assert np.all(batch.users == 1)
        with pytest.raises(TrainingError):
            NegativeSampler(from_lists([[0, 1]], num_items=2))


class TestAdam:
    def test_zero_gradient_is_noop(self):
        x = {"w": np.array([1.0, -2.0])}
        adam_step(x, {"w": np.zeros(2)}, AdamState(), 0.1)
        np.testing.assert_array_equal(x["w"], [1.0, -2.0])

    def test_first_step_moves_by_lr(self):
        # bias correction makes the first step lr * g / (|g| + eps)
        x = {"w": np.array([1.0, 1.0, 1.0])}
        g = np.array([3.0, -0.5, 1e-3])
        adam_step(x, {"w": g}, AdamState(), 0.01)
        np.testing.assert_allclose(x["w"], 1.0 - 0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)

    def test_minimizes_quadratic(self):
        x = {"w": np.array([3.0, -4.0])}
        state = AdamState()
        for _ in range(3000):
            adam_step(x, {"w": 2 * x["w"]}, state, 0.05)
        np.testing.assert_allclose(x["w"], 0.0, atol=1e-3)

    def test_non_finite_gradient(self):
        with pytest.raises(FloatingPointError):
            adam_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])}, AdamState(), 0.1)

    def test_shape_mismatch(self):
        with pytest.raises(TrainingError):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), 0.1)


class TestFit:
    def test_patience_zero_runs_one_epoch(self, planted):
        ds, feats = planted
        result = fit(ds, feats, FAST.replace(patience=0, max_epochs=50))
        assert len(result.history) == 1
        assert result.stop_reason == "early_stop"

    def test_history_rows(self, planted):
        ds, feats = planted
        result = fit(ds, feats, FAST)
        assert [r["epoch"] for r in result.history] == [1, 2, 3, 4]
        row = result.history[0]
        for key in ("rec_loss", "reg", "total", "cl_loss_v", "cl_loss_t", "val_R@20", "val_N@10"):
            assert key in row and math.isfinite(row[key])
        assert result.best_metric == max(r["val_R@20"] for r in result.history)
        assert set(result.loss_curve[0]) == {"epoch", "rec_loss", "reg", "total",
                                             "cl_loss_v", "cl_loss_t"}

    def test_deterministic(self, planted):
        ds, feats = planted
        a, b = fit(ds, feats, FAST), fit(ds, feats, FAST)
        for k, t in a.model.params.tensors().items():
            np.testing.assert_array_equal(t, b.model.params.tensors()[k])
        assert [r["total"] for r in a.history] == [r["total"] for r in b.history]

    def test_best_checkpoint_restored(self, planted):
        ds, feats = planted
        result = fit(ds, feats, FAST.replace(max_epochs=6))
        from egorec.metrics import evaluate
        assert evaluate(result.model, ds, "val")["R@20"] == result.best_metric

    def test_loss_decreases(self, planted):
        ds, feats = planted
        result = fit(ds, feats, FAST.replace(max_epochs=15, patience=100, lr=5e-3))
        assert result.history[-1]["rec_loss"] < result.history[0]["rec_loss"]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_restores_best(self, planted):
        ds, feats = planted
        result = fit(ds, feats, FAST.replace(lr=1e200, max_epochs=30, patience=30))
        assert result.stop_reason.startswith("diverged")
        result.model.params.check_finite()


def test_checkpoint_round_trip(tmp_path, planted):
    ds, feats = planted
    result = fit(ds, feats, FAST.replace(max_epochs=1))
    save_checkpoint(tmp_path / "ck", result.model.params, FAST, {"best_epoch": 1})
    params, manifest = load_checkpoint(tmp_path / "ck")
    for k, t in result.model.params.tensors().items():
        np.testing.assert_array_equal(params.tensors()[k], t)
    assert manifest["config"]["dim"] == 8 and manifest["best_epoch"] == 1


class TestGrid:
    def test_default_grid_size(self):
        assert len(enumerate_grid(DEFAULT_GRID)) == 36

    def test_single_point_equals_single_fit(self, planted):
        ds, feats = planted
        rows = grid_search(ds, feats, {"reg_weight": [1e-3]}, base=FAST)
        single = fit(ds, feats, FAST.replace(reg_weight=1e-3))
        assert len(rows) == 1 and rows[0]["best"]
        assert rows[0]["val_R@20"] == single.best_metric

    def test_two_by_two(self, planted):
        ds, feats = planted
        rows = grid_search(ds, feats, {"reg_weight": [1e-2, 1e-4], "knn_k": [2, 4]},
                           base=FAST.replace(max_epochs=2))
        assert len(rows) == 4
        assert [r["rank"] for r in rows] == [1, 2, 3, 4]
        assert sum(r["best"] for r in rows) == 1
        scores = [r["val_R@20"] for r in rows]
        assert scores == sorted(scores, reverse=True)

    def test_invalid_value_rejected_before_training(self, planted):
        ds, feats = planted
        from egorec.config import ConfigError
        with pytest.raises(ConfigError):
            grid_search(ds, feats, {"tau": [0.2, -1.0]}, base=FAST)


def test_ablation_rows(planted):
    ds, feats = planted
    rows = ablate(ds, feats, FAST.replace(max_epochs=1), layer_values=(1, 2))
    assert [r["variant"] for r in rows] == ["L=1", "L=2", "L=2 w/o CL"]
    assert rows[-1]["cl_weight"] == 0.0
