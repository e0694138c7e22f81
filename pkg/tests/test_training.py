import logging
import math

import numpy as np
import pytest

from fsct.episodes import sample_episode, episode_rng
from fsct.model import ModelConfig, ModelState
from fsct.optim import AdamW
from fsct.training import (
    EpochRecord,
    TrainConfig,
    TrainingDiverged,
    accuracy,
    episode_loss,
    evaluate,
    train,
    train_step,
)


def feature_config(**kw):
    cfg = dict(n_way=5, k_shot=1, queries_per_class=1, backbone="identity", input_shape=(8,), num_heads=2)
    cfg.update(kw)
    return ModelConfig(**cfg)


def param_copy(state):
    return {k: v.copy() for k, v in state.model.state_arrays().items()}


class TestEpisodeLoss:
    def test_perfect(self):
        assert episode_loss(np.eye(3), [0, 1, 2]).item() == 0.0

    @pytest.mark.parametrize("n", [2, 3, 5, 10, 20])
    def test_uniform_is_log_n(self, n):
        assert abs(episode_loss(np.full((4, n), 1.0 / n), np.arange(4) % n).item() - math.log(n)) <= 1e-12

    def test_direct_value(self):
        assert abs(episode_loss([[0.7, 0.2, 0.1]], [0]).item() - (-math.log(0.7))) < 1e-15
        assert abs(-math.log(0.7) - 0.3567) < 1e-4

    def test_zero_probability_floored(self, caplog):
        with caplog.at_level(logging.WARNING):
            loss = episode_loss([[1.0, 0.0]], [1]).item()
        assert loss == pytest.approx(-math.log(1e-12))
        assert "floored" in caplog.text


class TestAccuracy:
    def test_percent(self):
        assert accuracy([0, 1, 1, 0], [0, 1, 0, 0]) == 75.0


class TestTrain:
    def test_zero_epochs_unchanged(self, small_dataset):
        state = ModelState.create(feature_config())
        before = param_copy(state)
        state, history = train(small_dataset, TrainConfig(epochs=0), state)
        assert history == []
        for k, v in state.model.state_arrays().items():
            np.testing.assert_array_equal(v, before[k])

    def test_lr_zero_bit_identical(self, small_dataset):
        state = ModelState.create(feature_config())
        before = param_copy(state)
        train(small_dataset, TrainConfig(epochs=2, episodes_per_epoch=3, val_episodes=2, lr=0.0), state)
        for k, v in state.model.state_arrays().items():
            np.testing.assert_array_equal(v, before[k])

    def test_overfit_single_episode(self, small_dataset):
        state = ModelState.create(feature_config(queries_per_class=3))
        ep = sample_episode(small_dataset.train, 5, 1, 3, episode_rng(0))
        opt = AdamW(state.model.parameters(), lr=1e-3)
        losses = [train_step(ep, state, opt) for _ in range(6)]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_log_records(self, small_dataset):
        seen = []
        state = ModelState.create(feature_config())
        _, history = train(small_dataset, TrainConfig(epochs=3, episodes_per_epoch=2, val_episodes=2), state,
                           on_epoch=seen.append)
        assert [r.epoch for r in history] == [0, 1, 2]
        assert seen == history
        assert isinstance(history[0], EpochRecord) and history[0].wall_time >= 0
        assert state.metadata["best_val_accuracy"] == max(r.val_accuracy for r in history)
        assert '"train_loss"' in history[0].to_json()

    def test_same_seed_same_history(self, small_dataset):
        runs = []
        for _ in range(2):
            state = ModelState.create(feature_config())
            _, hist = train(small_dataset, TrainConfig(epochs=2, episodes_per_epoch=3, val_episodes=2), state,
                            clock=lambda: 0.0)
            runs.append((hist, param_copy(state)))
        assert runs[0][0] == runs[1][0]
        for k in runs[0][1]:
            np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])

    def test_non_finite_loss_aborts(self, small_dataset):
        state = ModelState.create(feature_config())
        state.model.theta_out.data[:] = np.nan
        with pytest.raises(TrainingDiverged, match=r"epoch 0, episode 0.*\[4, 0, 0, 0\]"):
            train(small_dataset, TrainConfig(epochs=1, episodes_per_epoch=2, seed=4), state)

    def test_desk_preset(self):
        cfg = TrainConfig.desk()
        assert (cfg.epochs, cfg.episodes_per_epoch, cfg.n_val) == (5, 50, 50)
        assert (TrainConfig().epochs, TrainConfig().episodes_per_epoch) == (50, 200)


class TestEvaluate:
    def test_oracle_and_constant_predictors(self, small_dataset):
        perfect = evaluate(small_dataset.test, lambda ep: ep.query_labels, 20, episode_shape=(5, 1, 2))
        assert perfect.mean == 100.0 and perfect.ci95 == 0.0
        const = evaluate(small_dataset.test, lambda ep: np.zeros(ep.n_query, dtype=int), 20, episode_shape=(5, 1, 2))
        assert const.mean == pytest.approx(20.0)

    def test_bare_predictor_needs_shape(self, small_dataset):
        with pytest.raises(ValueError):
            evaluate(small_dataset.test, lambda ep: ep.query_labels, 2)

    def test_deterministic_parallel_and_audited(self, small_dataset):
        state = ModelState.create(feature_config(queries_per_class=2))
        a = evaluate(small_dataset.test, state, 12, seed=3)
        b = evaluate(small_dataset.test, state, 12, seed=3)
        c = evaluate(small_dataset.test, state, 12, seed=3, workers=4)
        assert a.mean == b.mean == c.mean
        np.testing.assert_array_equal(a.accuracies, c.accuracies)
        assert a.recompute() == a.mean
        assert [e.category_ids for e in a.episodes] == [e.category_ids for e in c.episodes]

    def test_interval(self, small_dataset):
        state = ModelState.create(feature_config(queries_per_class=2))
        res = evaluate(small_dataset.test, state, 30, seed=1)
        assert res.ci95 == pytest.approx(1.96 * res.accuracies.std() / math.sqrt(30))
        assert str(res) == f"{res.mean:.2f} +- {res.ci95:.2f}"
