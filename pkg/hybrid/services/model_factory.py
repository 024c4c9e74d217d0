"""
Model factory for the ANN baseline, the SNN baseline and the S_kA_m hybrids.

A hybrid replaces the first ``k`` convolutions of the ANN with spiking
convolutions and places the accumulator right after layer ``k`` (at the very
front when k=0). The three dense layers are always non-spiking, except in the
SNN baseline, which has a spiking dense head, a spike-count readout and no
accumulator.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from django.conf import settings

from .accumulator import AccumulatorConfig
from .autodiff import Tensor
from .exceptions import BuildError, ConfigurationError, DimensionError
from .layers import (
    Accumulate, Conv, Dense, Flatten, Layer, Pool, SpikeCount, SpikeFlatten, SpikePool, SpkConv,
    SpkDense,
)
from .spiking import ForwardContext

logger = logging.getLogger(__name__)

MODEL_NAMES = ('ann', 's1a4', 's2a3', 's3a2', 's4a1', 's5a0', 'snn')
SPIKING_CONVS = {'ann': 0, 's1a4': 1, 's2a3': 2, 's3a2': 3, 's4a1': 4, 's5a0': 5, 'snn': 5}

CANONICAL_CHANNELS = (16, 32, 64, 64, 128)
CANONICAL_DENSE = (256, 128)
CANONICAL_POOLS = (1, 2, 3, 5)

# Published full-scale figures (DvsGesture, 128x128x50); annotations only.
TABLE_I_REFERENCE = {
    'ann': {'parameters': {5: 223_991, 10: 223_631, 25: 223_415}, 'cores': 0},
    's1a4': {'parameters': {5: 225_943, 10: 224_503, 25: 223_639}, 'cores': 16},
    's2a3': {'parameters': {5: 233_727, 10: 227_967, 25: 224_511}, 'cores': 32},
    's3a2': {'parameters': {5: 264_839, 10: 241_799, 25: 227_975}, 'cores': 36},
    's4a1': {'parameters': {5: 389_263, 10: 297_103, 25: 241_807}, 'cores': 38},
    's5a0': {'parameters': {5: 3_041_431, 10: 1_566_871, 25: 683_135}, 'cores': 42},
    'snn': {'parameters': {5: 387_229, 10: 387_229, 25: 387_229}, 'cores': 58},
}


@dataclass(frozen=True)
class HybridModelSpec:
    """Declarative description of one architecture of the family."""

    model: str
    interval: Optional[int] = None
    input_shape: Tuple[int, int, int, int] = (2, 32, 32, 20)
    channel_schedule: Tuple[int, ...] = CANONICAL_CHANNELS
    dense_schedule: Tuple[int, ...] = CANONICAL_DENSE
    class_count: int = 3
    kernel: int = 3
    pool_after: Tuple[int, ...] = CANONICAL_POOLS
    pad_final_group: bool = False

    def __post_init__(self):
        if self.model not in MODEL_NAMES:
            raise ConfigurationError(f"unknown model {self.model!r}; expected one of {MODEL_NAMES}")
        if len(self.input_shape) != 4 or any(d < 1 for d in self.input_shape):
            raise ConfigurationError(f"input_shape must be (2, H, W, T), got {self.input_shape}")
        if len(self.channel_schedule) != 5:
            raise ConfigurationError("channel_schedule must list 5 convolution widths")
        if len(self.dense_schedule) != 2:
            raise ConfigurationError("dense_schedule must list the 2 hidden dense widths")
        if self.class_count < 2:
            raise ConfigurationError(f"class_count must be at least 2, got {self.class_count}")
        if not self.is_snn:
            if self.interval is None:
                raise ConfigurationError(f"model {self.model} needs an interval",
                                         missing_fields=['interval'])
            AccumulatorConfig(self.interval, self.timesteps, self.pad_final_group)

    @property
    def is_snn(self) -> bool:
        return self.model == 'snn'

    @property
    def spiking_convs(self) -> int:
        return SPIKING_CONVS[self.model]

    @property
    def non_spiking_convs(self) -> int:
        return 0 if self.is_snn else 5 - self.spiking_convs

    @property
    def timesteps(self) -> int:
        return self.input_shape[-1]

    def accumulator_config(self) -> Optional[AccumulatorConfig]:
        if self.is_snn:
            return None
        return AccumulatorConfig(self.interval, self.timesteps, self.pad_final_group)

    def to_dict(self) -> Dict:
        data = asdict(self)
        for key in ('input_shape', 'channel_schedule', 'dense_schedule', 'pool_after'):
            data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'HybridModelSpec':
        fields = dict(data)
        for key in ('input_shape', 'channel_schedule', 'dense_schedule', 'pool_after'):
            if key in fields:
                fields[key] = tuple(fields[key])
        return cls(**fields)


class BuiltModel:
    """Ordered layers plus the parameter store of one built architecture."""

    def __init__(self, spec: HybridModelSpec, layers: List[Layer]):
        self.spec = spec
        self.layers = layers
        self.accumulator_index: Optional[int] = next(
            (i for i, layer in enumerate(layers) if isinstance(layer, Accumulate)), None
        )

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for layer in self.layers:
            params.update(layer.parameters())
        return params

    @property
    def parameter_count(self) -> int:
        return sum(layer.parameter_count for layer in self.layers)

    @property
    def spiking_layers(self) -> List[Layer]:
        return [layer for layer in self.layers if layer.spiking and layer.neurons]

    @property
    def ann_layers(self) -> List[Layer]:
        """Non-spiking compute layers (convolutions and dense) after the accumulator."""
        return [layer for layer in self.layers if not layer.spiking and layer.is_compute]

    @property
    def neuron_counts(self) -> Dict[str, int]:
        return {layer.name: layer.neurons for layer in self.spiking_layers}

    def forward(self, x: Union[Tensor, np.ndarray], ctx: Optional[ForwardContext] = None) -> Tensor:
        """Logits (N, classes) for a batch of spike samples (N, 2, H, W, T)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise DimensionError("batch does not match the model input", x.shape,
                                 self.spec.input_shape)
        ctx = ctx or ForwardContext.from_settings()
        for layer in self.layers:
            x = layer.forward(x, ctx)
        return x

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.numpy() for name, p in self.parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise ConfigurationError("weights do not cover the model", missing_fields=missing)
        for name, tensor in params.items():
            tensor.assign(state[name])

    def summary(self) -> List[Dict]:
        return [layer.describe() for layer in self.layers]

    def __repr__(self) -> str:
        return (f"BuiltModel({self.spec.model}, I={self.spec.interval}, "
                f"{len(self.layers)} layers, {self.parameter_count} parameters)")


def _pool_fits(shape: Sequence[int]) -> bool:
    return shape[1] >= 2 and shape[2] >= 2


def build(spec: HybridModelSpec, seed: int = 0) -> BuiltModel:
    """Build and initialize the layer chain for ``spec``.

    Weights are He-normal from ``np.random.default_rng(seed)``; biases start at 0.
    """
    k = spec.spiking_convs
    acc_config = spec.accumulator_config()
    layers: List[Layer] = []

    def append(layer: Layer) -> Tuple[int, ...]:
        layers.append(layer)
        return layer.out_shape

    shape: Tuple[int, ...] = tuple(spec.input_shape)
    if acc_config is not None and k == 0:
        shape = append(Accumulate('accumulator', shape, acc_config))

    for index, filters in enumerate(spec.channel_schedule, start=1):
        spiking = index <= k
        conv_cls = SpkConv if spiking else Conv
        shape = append(conv_cls(f"conv{index}", shape, filters, kernel=spec.kernel))
        if index in spec.pool_after:
            if _pool_fits(shape):
                pool_cls = SpikePool if spiking else Pool
                shape = append(pool_cls(f"pool{index}", shape))
            else:
                logger.debug(f"Skipping pool{index}: spatial extent {shape[1:3]} is below 2x2")
        if acc_config is not None and index == k:
            shape = append(Accumulate('accumulator', shape, acc_config))

    hidden = list(spec.dense_schedule)
    if spec.is_snn:
        shape = append(SpikeFlatten('flatten', shape))
        for index, units in enumerate(hidden + [spec.class_count], start=1):
            shape = append(SpkDense(f"fc{index}", shape, units))
        append(SpikeCount('readout', shape))
    else:
        shape = append(Flatten('flatten', shape))
        for index, units in enumerate(hidden, start=1):
            shape = append(Dense(f"fc{index}", shape, units))
        append(Dense(f"fc{len(hidden) + 1}", shape, spec.class_count, activation=False))

    if layers[-1].out_shape != (spec.class_count,):
        raise BuildError(f"head emits {layers[-1].out_shape}", layer=layers[-1].name)

    rng = np.random.default_rng(seed)
    for layer in layers:
        layer.init_parameters(rng)

    model = BuiltModel(spec, layers)
    logger.info(f"Built {model}")
    return model


def build_named(model: str, interval: Optional[int] = None,
                input_shape: Optional[Sequence[int]] = None, class_count: Optional[int] = None,
                seed: int = 0, **overrides) -> BuiltModel:
    """Build a registry model with the canonical schedule."""
    shape = tuple(input_shape or settings.DESK_INPUT_SHAPE)
    classes = class_count or settings.DEFAULT_CLASS_COUNT
    return build(HybridModelSpec(model=model, interval=interval, input_shape=shape,
                                 class_count=classes, **overrides), seed=seed)


def count_parameters(model: BuiltModel) -> int:
    return model.parameter_count


def neuron_census(model: BuiltModel) -> Dict[str, int]:
    """Neurons per spiking layer (pre-pool output channels × height × width, or units)."""
    return model.neuron_counts


def table_reference(model_name: str) -> Dict:
    return TABLE_I_REFERENCE.get(model_name, {})


@dataclass
class LayerCensus:
    """Per-layer counts consumed by the cost model."""

    name: str
    kind: str
    spiking: bool
    parameters: int
    macs: int
    neurons: int
    fan_out: int


def layer_census(model: BuiltModel) -> List[LayerCensus]:
    return [
        LayerCensus(layer.name, layer.kind, layer.spiking, layer.parameter_count, layer.macs,
                    layer.neurons, layer.fan_out)
        for layer in model.layers
    ]
