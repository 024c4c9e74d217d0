from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from hybrid.services import trainer
from hybrid.services.autodiff import Tensor
from hybrid.services.event_io import SampleSet, synth_gestures
from hybrid.services.exceptions import ConfigurationError, DimensionError, DivergenceError
from hybrid.services.model_factory import HybridModelSpec, build
from hybrid.services.trainer import (
    SGD,
    Adam,
    EvalReport,
    TrainConfig,
    batch_gradients,
    clip_gradients,
    evaluate,
    pair_classes,
    train,
)

SHAPE = (2, 8, 8, 4)


def tiny(model='s2a3', seed=0):
    spec = HybridModelSpec(model=model, interval=2, input_shape=SHAPE,
                           channel_schedule=(4, 4, 8, 8, 8), dense_schedule=(16, 8))
    return build(spec, seed=seed)


@pytest.fixture
def samples():
    return synth_gestures(3, 2, SHAPE, seed=7)


class TestConfig:
    @pytest.mark.parametrize('kwargs', [
        {'epochs': -1}, {'batch_size': 0}, {'num_threads': 0}, {'learning_rate': -1.0},
        {'beta1': 1.0}, {'optimizer': 'rmsprop'},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kwargs)

    def test_from_settings_skips_unset_overrides(self, settings):
        settings.TRAIN_EPOCHS = 4
        cfg = TrainConfig.from_settings(epochs=None, batch_size=3)
        assert cfg.epochs == 4 and cfg.batch_size == 3


class TestOptimizers:
    def test_clip_scales_to_max_norm(self):
        grads = {'a': np.array([3.0, 0.0]), 'b': np.array([4.0])}
        assert clip_gradients(grads, 1.0) == pytest.approx(5.0)
        assert np.sqrt(sum(np.sum(g ** 2) for g in grads.values())) == pytest.approx(1.0)

    def test_clip_zero_disables(self):
        grads = {'a': np.array([30.0])}
        clip_gradients(grads, 0.0)
        assert grads['a'][0] == 30.0

    def test_adam_first_step_moves_by_learning_rate(self):
        w = Tensor(np.zeros(3), requires_grad=True)
        adam = Adam({'w': w}, TrainConfig(learning_rate=0.1, clip_norm=0.0))
        adam.step({'w': np.array([1.0, -2.0, 0.0])})
        np.testing.assert_allclose(w.data, [-0.1, 0.1, 0.0], atol=1e-6)
        assert adam.step_count == 1

    def test_adam_state_round_trip(self):
        w = Tensor(np.zeros(2), requires_grad=True)
        adam = Adam({'w': w}, TrainConfig())
        adam.step({'w': np.ones(2)})
        other = Adam({'w': Tensor(np.zeros(2), requires_grad=True)}, TrainConfig())
        other.load_state_dict(adam.state_dict(), adam.step_count)
        np.testing.assert_array_equal(other.m['w'], adam.m['w'])
        assert other.step_count == 1

    def test_sgd_step(self):
        w = Tensor(np.ones(2), requires_grad=True)
        SGD({'w': w}, TrainConfig(optimizer='sgd', learning_rate=0.5, clip_norm=0.0)).step(
            {'w': np.array([1.0, 2.0])})
        np.testing.assert_allclose(w.data, [0.5, 0.0])


class TestBatchGradients:
    def test_thread_count_does_not_change_gradients(self, samples):
        model = tiny()
        loss1, grads1, pred1 = batch_gradients(model, samples.frames, samples.labels, 1)
        with ThreadPoolExecutor(max_workers=3) as executor:
            loss3, grads3, pred3 = batch_gradients(model, samples.frames, samples.labels, 3,
                                                   executor=executor)
        serial3 = batch_gradients(model, samples.frames, samples.labels, 3)
        assert loss3 == serial3[0]
        for name in grads3:
            np.testing.assert_array_equal(grads3[name], serial3[1][name])
            np.testing.assert_allclose(grads3[name], grads1[name], rtol=1e-10, atol=1e-12)
        assert loss1 == pytest.approx(loss3, rel=1e-12)
        np.testing.assert_array_equal(pred1, pred3)

    def test_every_parameter_has_a_gradient(self, samples):
        model = tiny()
        _, grads, _ = batch_gradients(model, samples.frames, samples.labels)
        assert set(grads) == set(model.parameters())

    def test_empty_batch(self, samples):
        with pytest.raises(DimensionError):
            batch_gradients(tiny(), samples.frames[:0], samples.labels[:0])


class TestTrain:
    def test_history_metrics_and_steps(self, samples, tmp_path):
        cfg = TrainConfig(epochs=2, batch_size=4, learning_rate=1e-2, seed=1)
        metrics = tmp_path / 'metrics.jsonl'
        result = train(tiny(), samples, cfg, metrics_path=metrics)
        assert [r['epoch'] for r in result.history] == [1, 2]
        assert len(metrics.read_text().splitlines()) == 2
        assert result.optimizer.step_count == 4
        assert result.report.confusion.sum() == len(samples)
        assert len(result.report.loss_curve) == 2

    def test_same_seed_same_weights(self, samples):
        cfg = TrainConfig(epochs=1, batch_size=3, learning_rate=1e-2, seed=2, num_threads=2)
        a = train(tiny(seed=5), samples, cfg).model.state_dict()
        b = train(tiny(seed=5), samples, cfg).model.state_dict()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_zero_epochs_only_evaluates(self, samples):
        model = tiny()
        before = model.state_dict()
        result = train(model, samples, TrainConfig(epochs=0))
        assert result.history == []
        for name, value in before.items():
            np.testing.assert_array_equal(model.state_dict()[name], value)

    def test_shape_mismatch(self):
        data = synth_gestures(3, 1, (2, 8, 8, 6))
        with pytest.raises(DimensionError):
            train(tiny(), data, TrainConfig(epochs=1))

    def test_divergence_restores_last_finite_weights(self, samples, monkeypatch):
        real = trainer.batch_gradients
        calls = []

        def flaky(*args, **kwargs):
            loss, grads, predicted = real(*args, **kwargs)
            calls.append(loss)
            return (float('nan') if len(calls) == 2 else loss), grads, predicted

        monkeypatch.setattr(trainer, 'batch_gradients', flaky)
        model = tiny()
        initial = model.state_dict()
        with pytest.raises(DivergenceError) as excinfo:
            train(model, samples, TrainConfig(epochs=1, batch_size=2, learning_rate=1e-2))
        error = excinfo.value
        assert (error.epoch, error.step) == (1, 1)
        for name, value in error.last_finite_state.items():
            np.testing.assert_array_equal(model.state_dict()[name], value)
        assert any(not np.array_equal(initial[n], error.last_finite_state[n]) for n in initial)

    @pytest.mark.parametrize('optimizer', ['adam', 'sgd'])
    def test_zero_learning_rate_keeps_weights(self, samples, optimizer):
        model = tiny()
        before = model.state_dict()
        train(model, samples, TrainConfig(epochs=2, batch_size=2, learning_rate=0.0,
                                          optimizer=optimizer))
        for name, value in before.items():
            np.testing.assert_array_equal(model.state_dict()[name], value)

    @pytest.mark.parametrize('model', ['s1a4', 's2a3', 's5a0'])
    def test_overfits_eight_samples(self, model):
        data = synth_gestures(2, 4, SHAPE, seed=3)
        cfg = TrainConfig(epochs=200, batch_size=8, learning_rate=1e-2, seed=0)
        result = train(tiny(model), data, cfg)
        assert result.optimizer.step_count == 200
        assert result.history[-1]['loss'] < 0.05

    def test_labels_beyond_the_model_classes(self):
        data = synth_gestures(5, 1, SHAPE)
        with pytest.raises(DimensionError, match='3 classes'):
            train(tiny(), data, TrainConfig(epochs=1))


class TestReports:
    def test_accuracy_and_pairs(self):
        report = EvalReport(np.array([[3, 1, 0], [2, 2, 0], [0, 0, 4]]))
        assert report.accuracy == pytest.approx(9 / 12)
        assert report.pair_accuracy(0, 1) == pytest.approx(5 / 8)
        assert report.to_dict()['confusion'][2] == [0, 0, 4]

    def test_empty_confusion(self):
        report = EvalReport(np.zeros((2, 2), dtype=int))
        assert report.accuracy == 0.0 and report.pair_accuracy(0, 1) == 0.0

    def test_evaluate_empty_set(self):
        report = evaluate(tiny(), SampleSet.empty(SHAPE, 3))
        assert report.confusion.shape == (3, 3) and report.accuracy == 0.0

    def test_constant_logits_score_chance(self, samples, monkeypatch):
        model = tiny()
        monkeypatch.setattr(model, 'forward',
                            lambda x, ctx=None: Tensor(np.zeros((x.shape[0], 3))))
        report = evaluate(model, samples)
        assert report.accuracy == pytest.approx(1 / 3)
        np.testing.assert_array_equal(report.confusion.sum(axis=1),
                                      np.bincount(samples.labels, minlength=3))

    def test_evaluate_rejects_labels_beyond_the_model_classes(self):
        with pytest.raises(DimensionError):
            evaluate(tiny(), synth_gestures(5, 1, SHAPE))

    def test_pair_classes(self):
        assert list(pair_classes(5)) == [(0, 1), (2, 3)]
