import numpy as np
import pytest

from hybrid.services.autodiff import (
    Graph,
    Tensor,
    gradients_close,
    mul,
    numerical_gradient,
    tensor_sum,
)
from hybrid.services.exceptions import (
    ConfigurationError,
    ContractError,
    DimensionError,
    NumericError,
    ResourceError,
)
from hybrid.services.spiking import (
    CubaLifParams,
    CubaLifState,
    ForwardContext,
    bptt_unroll,
    cuba_lif,
    cuba_lif_step,
    is_binary,
    relaxed_spike,
    spike_pool,
    spike_rate,
    spk_conv_forward,
    spk_dense_forward,
    surrogate_grad,
)

P = CubaLifParams()


def lif_oracle(drive, p):
    """Scalar CUBA-LIF recurrence over one neuron's drive sequence."""
    u = v = 0.0
    spikes = []
    for x in drive:
        u = (1.0 - p.current_decay) * u + x
        v = (1.0 - p.voltage_decay) * v + u
        fired = 1.0 if v >= p.threshold else 0.0
        if fired:
            v = 0.0
        spikes.append(fired)
    return spikes


def conv_oracle(x, w, pad):
    """Direct (C,H,W) x (F,C,k,k) cross-correlation, stride 1."""
    channels, height, width = x.shape
    filters, _, k, _ = w.shape
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    out_h, out_w = height + 2 * pad - k + 1, width + 2 * pad - k + 1
    out = np.zeros((filters, out_h, out_w))
    for f in range(filters):
        for i in range(out_h):
            for j in range(out_w):
                out[f, i, j] = (padded[:, i:i + k, j:j + k] * w[f]).sum()
    return out


class TestNeuron:
    def test_constant_drive_spike_train(self):
        spikes = cuba_lif(Tensor(np.full((1, 4), 0.5)), P)
        np.testing.assert_array_equal(spikes.data, [[0.0, 1.0, 1.0, 1.0]])

    def test_zero_drive_never_spikes(self):
        assert not cuba_lif(Tensor(np.zeros((3, 7))), P).data.any()

    def test_step_matches_fused_loop(self, rng):
        drive = rng.uniform(0.0, 1.0, size=(5, 8))
        fused = cuba_lif(Tensor(drive), P).data
        state = CubaLifState.zeros((5,))
        for t in range(8):
            state, s = cuba_lif_step(state, Tensor(drive[:, t]), P)
            np.testing.assert_array_equal(s.data, fused[:, t])

    def test_reset_to_zero_after_spike(self):
        state, s = cuba_lif_step(CubaLifState.zeros((1,)), Tensor([2.0]), P)
        assert s.data[0] == 1.0
        assert state.v.data[0] == 0.0
        assert state.u.data[0] == 2.0

    def test_non_finite_drive_names_layer_and_timestep(self):
        drive = np.zeros((2, 5))
        drive[1, 2] = np.nan
        with pytest.raises(NumericError) as excinfo:
            cuba_lif(Tensor(drive), P, layer='conv1')
        assert excinfo.value.layer == 'conv1'
        assert excinfo.value.timestep == 2

    def test_step_rejects_shape_mismatch(self):
        with pytest.raises(DimensionError):
            cuba_lif_step(CubaLifState.zeros((3,)), Tensor(np.zeros(4)), P)

    def test_history_budget(self, settings):
        settings.BPTT_MEMORY_BUDGET_MB = 0
        with pytest.raises(ResourceError):
            cuba_lif(Tensor(np.ones((4, 4)), requires_grad=True), P)

    @pytest.mark.parametrize('kwargs', [
        {'threshold': 0.0},
        {'current_decay': 1.5},
        {'surrogate_width': -1.0},
    ])
    def test_invalid_params(self, kwargs):
        with pytest.raises(ConfigurationError):
            CubaLifParams(**kwargs)

    def test_params_from_settings(self, settings):
        settings.LIF_THRESHOLD = 2.0
        assert CubaLifParams.from_settings().threshold == 2.0

    def test_matches_scalar_recurrence(self):
        p = CubaLifParams(current_decay=0.5, voltage_decay=0.5, threshold=1.0)
        spikes = cuba_lif(Tensor(np.full((1, 20), 0.3)), p).data[0]
        expected = lif_oracle([0.3] * 20, p)
        np.testing.assert_array_equal(spikes, expected)
        assert spikes[4] == 1.0 and spikes[:4].sum() == 0

    def test_infinite_threshold_never_spikes(self):
        p = CubaLifParams(threshold=np.inf)
        assert not cuba_lif(Tensor(np.full((3, 10), 50.0)), p).data.any()

    def test_vanishing_threshold_spikes_whenever_driven(self):
        p = CubaLifParams(threshold=1e-12)
        drive = np.zeros((4, 8))
        drive[:, 2:] = np.linspace(0.1, 2.0, 4)[:, None]
        spikes = cuba_lif(Tensor(drive), p).data
        assert not spikes[:, :2].any()
        assert spikes[:, 2:].all()

    def test_batch_permutation_permutes_outputs(self, rng):
        drive = rng.uniform(0.0, 1.0, size=(5, 3, 9))
        order = rng.permutation(5)
        plain = cuba_lif(Tensor(drive), P).data
        shuffled = cuba_lif(Tensor(drive[order]), P).data
        np.testing.assert_array_equal(shuffled, plain[order])


class TestSurrogate:
    def test_peak_at_threshold(self):
        assert surrogate_grad(1.0, P) == pytest.approx(1.0 / (2 * P.surrogate_width))
        assert surrogate_grad(3.0, P) < surrogate_grad(1.5, P)

    def test_relaxed_spike_derivative_is_surrogate(self):
        v = np.linspace(-1.0, 3.0, 17)
        eps = 1e-6
        numeric = (relaxed_spike(v + eps, P) - relaxed_spike(v - eps, P)) / (2 * eps)
        np.testing.assert_allclose(numeric, surrogate_grad(v, P), rtol=1e-5, atol=1e-8)
        assert relaxed_spike(np.array(1.0), P) == pytest.approx(0.5)

    def test_relaxed_bptt_matches_finite_differences(self, rng):
        drive = Tensor(rng.uniform(-0.5, 1.5, size=(3, 6)), requires_grad=True)
        cotangent = rng.normal(size=(3, 6))

        def loss():
            return tensor_sum(mul(cuba_lif(drive, P, relaxed=True), cotangent))

        grads = Graph.trace(loss()).backward()
        numeric = numerical_gradient(lambda: float(loss().data), drive)
        assert gradients_close(grads[drive], numeric)


class TestSpikingLayers:
    def test_conv_output_shape_and_binary(self, rng):
        x = Tensor((rng.random((2, 6, 6, 4)) < 0.5).astype(float))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        out = spk_conv_forward(x, w, P, pad=1)
        assert out.shape == (3, 6, 6, 4)
        assert is_binary(out)

    def test_conv_batched_matches_single(self, rng):
        x = (rng.random((2, 2, 5, 5, 3)) < 0.4).astype(float)
        w = Tensor(rng.normal(size=(2, 2, 3, 3)))
        batched = spk_conv_forward(Tensor(x), w, P, pad=1).data
        single = spk_conv_forward(Tensor(x[1]), w, P, pad=1).data
        np.testing.assert_array_equal(batched[1], single)

    def test_conv_rejects_non_binary_input(self):
        x = Tensor(np.full((1, 4, 4, 2), 0.5))
        with pytest.raises(ContractError):
            spk_conv_forward(x, Tensor(np.ones((1, 1, 3, 3))), P)

    def test_relaxed_conv_accepts_graded_input(self):
        x = Tensor(np.full((1, 4, 4, 2), 0.5))
        out = spk_conv_forward(x, Tensor(np.ones((1, 1, 3, 3))), P, relaxed=True)
        assert out.shape == (1, 2, 2, 2)

    def test_dense_layer_shape(self, rng):
        x = Tensor((rng.random((4, 10, 5)) < 0.5).astype(float))
        out = spk_dense_forward(x, Tensor(rng.normal(size=(3, 10))), P)
        assert out.shape == (4, 3, 5)

    def test_or_pool(self):
        x = np.zeros((1, 4, 4, 2))
        x[0, 1, 1, 0] = 1.0
        x[0, 2, 3, 1] = 1.0
        out = spike_pool(Tensor(x), mode='or').data
        assert out.shape == (1, 2, 2, 2)
        assert out[0, 0, 0, 0] == 1.0 and out[0, 1, 1, 1] == 1.0
        assert out.sum() == 2.0

    def test_sum_threshold_pool(self):
        x = np.zeros((1, 2, 2, 2))
        x[0, 0, 0, 0] = 1.0
        x[0, :, :, 1] = [[1.0, 1.0], [0.0, 0.0]]
        out = spike_pool(Tensor(x), mode='sum_threshold', threshold=2.0).data
        np.testing.assert_array_equal(out[0, 0, 0], [0.0, 1.0])

    def test_pool_rejects_odd_extent(self):
        with pytest.raises(DimensionError):
            spike_pool(Tensor(np.zeros((1, 3, 4, 2))), mode='or')

    def test_pool_rejects_unknown_mode(self):
        with pytest.raises(ConfigurationError):
            spike_pool(Tensor(np.zeros((1, 2, 2, 1))), mode='max')

    def test_conv_matches_composed_oracle(self, rng):
        x = (rng.random((2, 8, 8, 6)) < 0.4).astype(float)
        w = rng.integers(-2, 3, size=(3, 2, 3, 3)) * 0.5
        out = spk_conv_forward(Tensor(x), Tensor(w), P, pad=1).data
        drive = np.stack([conv_oracle(x[..., t], w, 1) for t in range(6)], axis=-1)
        expected = np.zeros_like(drive)
        for index in np.ndindex(drive.shape[:-1]):
            expected[index] = lif_oracle(drive[index], P)
        np.testing.assert_array_equal(out, expected)

    def test_conv_batch_permutation(self, rng):
        x = (rng.random((4, 2, 6, 6, 5)) < 0.4).astype(float)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        order = np.array([2, 0, 3, 1])
        plain = spk_conv_forward(Tensor(x), w, P, pad=1).data
        shuffled = spk_conv_forward(Tensor(x[order]), w, P, pad=1).data
        np.testing.assert_array_equal(shuffled, plain[order])

    @pytest.mark.parametrize('shape', [(1, 4, 4, 3), (3, 6, 8, 5)])
    def test_or_pool_matches_window_enumeration(self, rng, shape):
        for _ in range(10):
            x = (rng.random(shape) < 0.2).astype(float)
            channels, height, width, timesteps = shape
            expected = np.zeros((channels, height // 2, width // 2, timesteps))
            for c, i, j, t in np.ndindex(expected.shape):
                window = [x[c, 2 * i + a, 2 * j + b, t] for a in (0, 1) for b in (0, 1)]
                expected[c, i, j, t] = 1.0 if any(window) else 0.0
            np.testing.assert_array_equal(spike_pool(Tensor(x), mode='or').data, expected)


class TestContext:
    def test_unknown_pool_mode(self):
        with pytest.raises(ConfigurationError):
            ForwardContext(pool_mode='avg')

    def test_record_accumulates(self):
        ctx = ForwardContext()
        ctx.record('conv1', 10, 4)
        ctx.record('conv1', 5, 1)
        assert ctx.activity['conv1'] == {'input_spikes': 15.0, 'output_spikes': 5.0}

    def test_bptt_unroll_needs_a_timestep(self):
        class Identity:
            def forward(self, x, ctx):
                return x

        with pytest.raises(ContractError):
            bptt_unroll(Identity(), Tensor(np.zeros((2, 0))))
        out = Tensor(np.ones((2, 3)))
        assert bptt_unroll(Identity(), out) is out

    def test_bptt_unroll_defaults_follow_settings(self, settings):
        class Neurons:
            def forward(self, x, ctx):
                return cuba_lif(x, ctx.params)

        drive = Tensor(np.full((2, 4), 1.5))
        assert bptt_unroll(Neurons(), drive).data.all()
        settings.LIF_THRESHOLD = 100.0
        assert not bptt_unroll(Neurons(), drive).data.any()


def test_spike_rate():
    assert spike_rate(np.array([[1, 0], [0, 0]])) == 0.25
    assert spike_rate(np.zeros(0)) == 0.0
