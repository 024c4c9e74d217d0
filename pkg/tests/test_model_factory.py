import numpy as np
import pytest

from hybrid.services.autodiff import Graph, Tensor, softmax_cross_entropy
from hybrid.services.exceptions import BuildError, ConfigurationError, DimensionError
from hybrid.services.layers import Accumulate, Conv, Pool, SpikePool, SpkConv
from hybrid.services.model_factory import (
    MODEL_NAMES,
    HybridModelSpec,
    build,
    build_named,
    count_parameters,
    layer_census,
    neuron_census,
    table_reference,
)
from hybrid.services.spiking import ForwardContext

SWEEP = (2, 32, 32, 50)
TINY = dict(input_shape=(2, 8, 8, 4), channel_schedule=(4, 4, 8, 8, 8), dense_schedule=(16, 8))


def tiny(model: str, interval=2, seed=0):
    return build(HybridModelSpec(model=model, interval=interval, **TINY), seed=seed)


def spikes(rng, shape):
    return (rng.random(shape) < 0.3).astype(float)


class TestSpec:
    def test_unknown_model(self):
        with pytest.raises(ConfigurationError):
            HybridModelSpec(model='s6a0', interval=5)

    def test_hybrid_needs_interval(self):
        with pytest.raises(ConfigurationError) as excinfo:
            HybridModelSpec(model='s2a3')
        assert excinfo.value.missing_fields == ['interval']

    def test_interval_must_divide_timesteps(self):
        with pytest.raises(ConfigurationError, match='does not divide'):
            HybridModelSpec(model='s2a3', interval=7, input_shape=(2, 32, 32, 20))

    def test_snn_ignores_interval(self):
        spec = HybridModelSpec(model='snn', interval=7)
        assert spec.accumulator_config() is None

    def test_dict_round_trip(self):
        spec = HybridModelSpec(model='s3a2', interval=10, input_shape=SWEEP, class_count=4)
        assert HybridModelSpec.from_dict(spec.to_dict()) == spec

    @pytest.mark.parametrize('model,spiking,plain', [
        ('ann', 0, 5), ('s1a4', 1, 4), ('s3a2', 3, 2), ('s5a0', 5, 0), ('snn', 5, 0),
    ])
    def test_split(self, model, spiking, plain):
        spec = HybridModelSpec(model=model, interval=5)
        assert spec.spiking_convs == spiking
        assert spec.non_spiking_convs == plain


class TestStructure:
    def test_ann_has_front_accumulator(self):
        model = build_named('ann', 5)
        assert isinstance(model.layers[0], Accumulate)
        assert model.layers[1].in_shape == (2 * 20 // 5, 32, 32)
        assert not model.spiking_layers

    @pytest.mark.parametrize('k', [1, 2, 3, 4])
    @pytest.mark.parametrize('interval', [5, 10, 25])
    def test_layer_after_accumulator_gets_expanded_channels(self, k, interval):
        model = build_named(f"s{k}a{5 - k}", interval, SWEEP)
        index = model.accumulator_index
        before = model.layers[index - 1].out_shape
        after = model.layers[index + 1]
        assert isinstance(after, Conv)
        assert after.in_shape[0] == before[0] * SWEEP[-1] // interval
        assert sum(isinstance(layer, SpkConv) for layer in model.layers) == k

    def test_snn_has_no_accumulator(self):
        model = build_named('snn')
        assert model.accumulator_index is None
        assert [layer.name for layer in model.layers][-1] == 'readout'

    def test_snn_parameters_independent_of_interval(self):
        counts = {count_parameters(build_named('snn', i, SWEEP)) for i in (5, 10, 25)}
        assert len(counts) == 1

    def test_s5a0_parameters_fall_with_interval(self):
        counts = [count_parameters(build_named('s5a0', i, SWEEP)) for i in (5, 10, 25)]
        assert counts[0] > counts[1] > counts[2]

    def test_canonical_s2a3_parameter_count(self):
        assert count_parameters(build_named('s2a3', 5)) == 354_131

    def test_neuron_census(self):
        census = neuron_census(build_named('s2a3', 5))
        assert census == {'conv1': 16 * 32 * 32, 'conv2': 32 * 16 * 16}

    def test_pools_skipped_below_two(self):
        model = tiny('s2a3')
        names = [layer.name for layer in model.layers]
        assert 'pool5' not in names
        assert 'pool1' in names and isinstance(model.layers[names.index('pool1')], SpikePool)
        assert isinstance(model.layers[names.index('pool3')], Pool)

    def test_odd_spike_pool_is_a_build_error(self):
        with pytest.raises(BuildError) as excinfo:
            build(HybridModelSpec(model='s5a0', interval=2, input_shape=(2, 12, 12, 4)))
        assert excinfo.value.layer == 'pool3'

    def test_same_seed_same_weights(self):
        a, b = tiny('s1a4', seed=3), tiny('s1a4', seed=3)
        for name, value in a.state_dict().items():
            np.testing.assert_array_equal(value, b.state_dict()[name])
        c = tiny('s1a4', seed=4)
        assert not np.array_equal(a.state_dict()['conv1.weight'], c.state_dict()['conv1.weight'])

    def test_layer_census_counts(self):
        model = build_named('s2a3', 5)
        census = {row.name: row for row in layer_census(model)}
        assert census['conv3'].macs == 64 * 8 * 8 * 128 * 9
        assert census['conv1'].fan_out == 16 * 9
        assert census['fc1'].parameters == 512 * 256 + 256
        assert sum(row.parameters for row in census.values()) == model.parameter_count

    def test_table_reference(self):
        assert table_reference('s2a3')['cores'] == 32
        assert table_reference('ann')['parameters'][5] == 223_991
        assert table_reference('unknown') == {}


class TestForward:
    @pytest.mark.parametrize('model', MODEL_NAMES)
    def test_logits_shape(self, rng, model):
        net = tiny(model)
        logits = net.forward(Tensor(spikes(rng, (2, 2, 8, 8, 4))))
        assert logits.shape == (2, 3)
        assert np.all(np.isfinite(logits.data))

    def test_rejects_wrong_input_shape(self, rng):
        with pytest.raises(DimensionError):
            tiny('s2a3').forward(spikes(rng, (1, 2, 8, 8, 6)))

    def test_activity_recorded_for_spiking_layers(self, rng):
        ctx = ForwardContext()
        tiny('s2a3').forward(Tensor(spikes(rng, (2, 2, 8, 8, 4))), ctx)
        assert set(ctx.activity) == {'conv1', 'conv2'}
        assert ctx.activity['conv1']['input_spikes'] > 0

    def test_every_parameter_receives_a_gradient(self, rng):
        net = tiny('s2a3')
        params = net.parameters()
        for p in params.values():
            p.zero_grad()
        x = Tensor(spikes(rng, (3, 2, 8, 8, 4)))
        loss = softmax_cross_entropy(net.forward(x, ForwardContext(relaxed=True)), [0, 1, 2])
        grads = Graph.trace(loss).backward()
        assert set(grads) == set(params.values())

    def test_state_dict_round_trip(self, rng):
        a, b = tiny('s3a2', seed=1), tiny('s3a2', seed=2)
        b.load_state_dict(a.state_dict())
        x = Tensor(spikes(rng, (2, 2, 8, 8, 4)))
        np.testing.assert_array_equal(a.forward(x).data, b.forward(x).data)

    def test_load_state_dict_reports_missing(self):
        net = tiny('ann')
        state = net.state_dict()
        state.pop('fc3.bias')
        with pytest.raises(ConfigurationError, match='fc3.bias'):
            net.load_state_dict(state)
