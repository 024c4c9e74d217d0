"""
Layer building blocks for hybrid models.

Shapes stored on a layer exclude the batch axis: non-spiking layers see
(C, H, W) or (F,), spiking layers carry the time axis last, (C, H, W, T) or
(F, T). ``forward`` always receives a batch with a leading N axis.
"""
import logging
from typing import Dict, Tuple

import numpy as np

from .accumulator import AccumulatorConfig, accumulate_forward
from .autodiff import Tensor, conv2d, dense, flatten, maxpool2d, relu, reshape, tensor_sum
from .exceptions import BuildError
from .spiking import ForwardContext, spike_pool, spk_conv_forward, spk_dense_forward

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]


def _he_normal(rng: np.random.Generator, shape: Shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Layer:
    """Base class: a named stage with a fixed per-sample input/output shape."""

    kind = 'layer'
    spiking = False

    def __init__(self, name: str, in_shape: Shape):
        self.name = name
        self.in_shape = tuple(in_shape)
        self.out_shape = self.infer_shape(self.in_shape)
        self.params: Dict[str, Tensor] = {}

    def infer_shape(self, in_shape: Shape) -> Shape:
        return in_shape

    def init_parameters(self, rng: np.random.Generator) -> None:
        """Layers without weights have nothing to initialize."""

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> Dict[str, Tensor]:
        return {f"{self.name}.{key}": value for key, value in self.params.items()}

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def macs(self) -> int:
        """Multiply-accumulates per sample when run as a dense (non-spiking) stage."""
        return 0

    @property
    def neurons(self) -> int:
        return 0

    @property
    def fan_out(self) -> int:
        """Postsynaptic targets reached by one presynaptic spike."""
        return 0

    @property
    def is_compute(self) -> bool:
        return bool(self.params)

    def describe(self) -> Dict:
        return {
            'name': self.name,
            'kind': self.kind,
            'in_shape': list(self.in_shape),
            'out_shape': list(self.out_shape),
            'parameters': self.parameter_count,
        }

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name}: {self.in_shape} -> {self.out_shape})"


class _ConvMixin:
    def _conv_shape(self, name: str, channels: int, height: int, width: int) -> Tuple[int, int]:
        k, pad, stride = self.kernel, self.pad, self.stride
        if k > height + 2 * pad or k > width + 2 * pad:
            raise BuildError(f"kernel {k} larger than padded input {height}x{width}", layer=name)
        return (height + 2 * pad - k) // stride + 1, (width + 2 * pad - k) // stride + 1

    def _init_conv(self, rng: np.random.Generator, channels: int) -> None:
        fan_in = channels * self.kernel * self.kernel
        self.params['weight'] = Tensor(
            _he_normal(rng, (self.filters, channels, self.kernel, self.kernel), fan_in),
            requires_grad=True, name=f"{self.name}.weight",
        )
        self.params['bias'] = Tensor(np.zeros(self.filters), requires_grad=True,
                                     name=f"{self.name}.bias")


class Conv(_ConvMixin, Layer):
    """Non-spiking convolution followed by ReLU."""

    kind = 'conv'

    def __init__(self, name: str, in_shape: Shape, filters: int, kernel: int = 3,
                 stride: int = 1, pad: int = 1):
        self.filters, self.kernel, self.stride, self.pad = filters, kernel, stride, pad
        super().__init__(name, in_shape)

    def infer_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 3:
            raise BuildError(f"expects (C, H, W) input, got {in_shape}", layer=self.name)
        return (self.filters,) + self._conv_shape(self.name, *in_shape)

    def init_parameters(self, rng):
        self._init_conv(rng, self.in_shape[0])

    def forward(self, x, ctx):
        return relu(conv2d(x, self.params['weight'], stride=self.stride, pad=self.pad,
                           bias=self.params['bias']))

    @property
    def macs(self) -> int:
        f, h, w = self.out_shape
        return f * h * w * self.in_shape[0] * self.kernel * self.kernel


class SpkConv(_ConvMixin, Layer):
    """Spiking convolution with CUBA-LIF activations."""

    kind = 'spkconv'
    spiking = True

    def __init__(self, name: str, in_shape: Shape, filters: int, kernel: int = 3,
                 stride: int = 1, pad: int = 1):
        self.filters, self.kernel, self.stride, self.pad = filters, kernel, stride, pad
        super().__init__(name, in_shape)

    def infer_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 4:
            raise BuildError(f"expects (C, H, W, T) spikes, got {in_shape}", layer=self.name)
        channels, height, width, timesteps = in_shape
        return (self.filters,) + self._conv_shape(self.name, channels, height, width) + (timesteps,)

    def init_parameters(self, rng):
        self._init_conv(rng, self.in_shape[0])

    def forward(self, x, ctx):
        out = spk_conv_forward(x, self.params['weight'], ctx.params, bias=self.params['bias'],
                               stride=self.stride, pad=self.pad, relaxed=ctx.relaxed,
                               layer=self.name)
        ctx.record(self.name, x.data.sum(), out.data.sum())
        return out

    @property
    def neurons(self) -> int:
        f, h, w, _ = self.out_shape
        return f * h * w

    @property
    def fan_out(self) -> int:
        return self.filters * self.kernel * self.kernel


class Pool(Layer):
    """2×2 max pooling; odd trailing rows and columns are dropped."""

    kind = 'pool'

    def infer_shape(self, in_shape):
        channels, height, width = in_shape
        if height < 2 or width < 2:
            raise BuildError(f"cannot pool a {height}x{width} map", layer=self.name)
        return channels, height // 2, width // 2

    def forward(self, x, ctx):
        return maxpool2d(x)


class SpikePool(Layer):
    kind = 'spikepool'
    spiking = True

    def infer_shape(self, in_shape):
        channels, height, width, timesteps = in_shape
        if height % 2 or width % 2:
            raise BuildError(f"spike pooling needs even dimensions, got {height}x{width}",
                             layer=self.name)
        return channels, height // 2, width // 2, timesteps

    def forward(self, x, ctx):
        return spike_pool(x, mode=ctx.pool_mode, threshold=ctx.pool_threshold, p=ctx.params,
                          relaxed=ctx.relaxed)


class Accumulate(Layer):
    """Spiking → non-spiking bridge; output channels grow by T/I."""

    kind = 'accumulate'

    def __init__(self, name: str, in_shape: Shape, config: AccumulatorConfig):
        self.config = config
        super().__init__(name, in_shape)

    def infer_shape(self, in_shape):
        if in_shape[-1] != self.config.timesteps:
            raise BuildError(
                f"accumulator configured for T={self.config.timesteps} receives T={in_shape[-1]}",
                layer=self.name,
            )
        return (self.config.output_channels(in_shape[0]),) + tuple(in_shape[1:-1])

    def forward(self, x, ctx):
        return accumulate_forward(x, self.config, strict=not ctx.relaxed, batched=True)

    def describe(self):
        info = super().describe()
        info['interval'] = self.config.interval
        return info


class Flatten(Layer):
    kind = 'flatten'

    def infer_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, ctx):
        return flatten(x, start_dim=1)


class SpikeFlatten(Layer):
    """Flatten spatial axes while keeping time: (C, H, W, T) → (C·H·W, T)."""

    kind = 'spikeflatten'
    spiking = True

    def infer_shape(self, in_shape):
        return int(np.prod(in_shape[:-1])), in_shape[-1]

    def forward(self, x, ctx):
        return reshape(x, (x.shape[0],) + self.out_shape)


class Dense(Layer):
    kind = 'dense'

    def __init__(self, name: str, in_shape: Shape, units: int, activation: bool = True):
        self.units = units
        self.activation = activation
        super().__init__(name, in_shape)

    def infer_shape(self, in_shape):
        if len(in_shape) != 1:
            raise BuildError(f"expects a flat input, got {in_shape}", layer=self.name)
        return (self.units,)

    def init_parameters(self, rng):
        fan_in = self.in_shape[0]
        self.params['weight'] = Tensor(_he_normal(rng, (self.units, fan_in), fan_in),
                                       requires_grad=True, name=f"{self.name}.weight")
        self.params['bias'] = Tensor(np.zeros(self.units), requires_grad=True,
                                     name=f"{self.name}.bias")

    def forward(self, x, ctx):
        out = dense(x, self.params['weight'], self.params['bias'])
        return relu(out) if self.activation else out

    @property
    def macs(self) -> int:
        return self.units * self.in_shape[0]


class SpkDense(Layer):
    """Spiking dense layer used by the SNN baseline head."""

    kind = 'spkdense'
    spiking = True

    def __init__(self, name: str, in_shape: Shape, units: int):
        self.units = units
        super().__init__(name, in_shape)

    def infer_shape(self, in_shape):
        if len(in_shape) != 2:
            raise BuildError(f"expects (F, T) spikes, got {in_shape}", layer=self.name)
        return self.units, in_shape[1]

    def init_parameters(self, rng):
        fan_in = self.in_shape[0]
        self.params['weight'] = Tensor(_he_normal(rng, (self.units, fan_in), fan_in),
                                       requires_grad=True, name=f"{self.name}.weight")
        self.params['bias'] = Tensor(np.zeros(self.units), requires_grad=True,
                                     name=f"{self.name}.bias")

    def forward(self, x, ctx):
        out = spk_dense_forward(x, self.params['weight'], ctx.params, bias=self.params['bias'],
                                relaxed=ctx.relaxed, layer=self.name)
        ctx.record(self.name, x.data.sum(), out.data.sum())
        return out

    @property
    def neurons(self) -> int:
        return self.units

    @property
    def fan_out(self) -> int:
        return self.units


class SpikeCount(Layer):
    """Readout: output spikes summed over time become the logits."""

    kind = 'spikecount'

    def infer_shape(self, in_shape):
        return in_shape[:-1]

    def forward(self, x, ctx):
        return tensor_sum(x, axis=-1)
