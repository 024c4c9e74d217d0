"""
CUBA-LIF neuron dynamics, spiking convolution, spike pooling and surrogate BPTT.

Spike tensors carry time on the trailing axis: (C, H, W, T) for one sample,
(N, C, H, W, T) for a batch. The training path runs every timestep of a layer
inside one recorded operation (:func:`cuba_lif`) whose backward rule walks the
stored neuron history in reverse, with the exponential surrogate standing in
for the derivative of the Heaviside spike function.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple, Union

import numpy as np
from django.conf import settings

from .autodiff import (
    DTYPE, Tensor, conv2d, dense, is_grad_enabled, maxpool2d, permute, reshape,
)
from .exceptions import (
    ConfigurationError, ContractError, DimensionError, NumericError, ResourceError,
)

logger = logging.getLogger(__name__)

POOL_MODES = ('or', 'sum_threshold')


@dataclass(frozen=True)
class CubaLifParams:
    """Neuron constants shared by every spiking layer of a model."""

    current_decay: float = 0.25
    voltage_decay: float = 0.1
    threshold: float = 1.0
    surrogate_width: float = 0.5

    def __post_init__(self):
        for name in ('current_decay', 'voltage_decay'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {value}")
        if not self.threshold > 0:
            raise ConfigurationError(f"threshold must be strictly positive, got {self.threshold}")
        if not self.surrogate_width > 0:
            raise ConfigurationError(
                f"surrogate_width must be strictly positive, got {self.surrogate_width}"
            )

    @classmethod
    def from_settings(cls) -> 'CubaLifParams':
        return cls(
            current_decay=settings.LIF_CURRENT_DECAY,
            voltage_decay=settings.LIF_VOLTAGE_DECAY,
            threshold=settings.LIF_THRESHOLD,
            surrogate_width=settings.SURROGATE_WIDTH,
        )


@dataclass
class CubaLifState:
    u: Tensor
    v: Tensor

    @classmethod
    def zeros(cls, shape: Tuple[int, ...]) -> 'CubaLifState':
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.u.shape


@dataclass
class ForwardContext:
    """Per-forward options and the activity record filled by spiking layers.

    ``activity`` maps a layer name to its input and output spike totals.
    """

    params: CubaLifParams = field(default_factory=CubaLifParams)
    relaxed: bool = False
    pool_mode: str = 'or'
    pool_threshold: float = 1.0
    activity: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.pool_mode not in POOL_MODES:
            raise ConfigurationError(
                f"unknown spike pool mode {self.pool_mode!r}; expected one of {POOL_MODES}"
            )

    @classmethod
    def from_settings(cls, relaxed: bool = False) -> 'ForwardContext':
        return cls(
            params=CubaLifParams.from_settings(),
            relaxed=relaxed,
            pool_mode=settings.SPIKE_POOL_MODE,
            pool_threshold=settings.SPIKE_POOL_THRESHOLD,
        )

    def record(self, layer: str, input_spikes: float, output_spikes: float) -> None:
        entry = self.activity.setdefault(layer, {'input_spikes': 0.0, 'output_spikes': 0.0})
        entry['input_spikes'] += float(input_spikes)
        entry['output_spikes'] += float(output_spikes)


# ========== neuron primitives ==========

ArrayOrTensor = Union[Tensor, np.ndarray, float]


def surrogate_grad(v: ArrayOrTensor, p: CubaLifParams) -> ArrayOrTensor:
    """Exponential spike-escape kernel ``exp(-|v-θ|/σ) / (2σ)``."""
    values = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=DTYPE)
    sigma = p.surrogate_width
    result = np.exp(-np.abs(values - p.threshold) / sigma) / (2.0 * sigma)
    if isinstance(v, Tensor):
        return Tensor(result)
    return result if result.ndim else float(result)


def relaxed_spike(v: np.ndarray, p: CubaLifParams) -> np.ndarray:
    """Smooth spike function whose derivative is exactly the surrogate."""
    sigma = p.surrogate_width
    shifted = v - p.threshold
    below = 0.5 * np.exp(np.minimum(shifted, 0.0) / sigma)
    above = 1.0 - 0.5 * np.exp(-np.maximum(shifted, 0.0) / sigma)
    return np.where(shifted < 0, below, above)


def _heaviside(v: np.ndarray, p: CubaLifParams) -> np.ndarray:
    return (v >= p.threshold).astype(DTYPE)


def _first_bad_timestep(values: np.ndarray) -> Optional[int]:
    bad = ~np.isfinite(values)
    if not bad.any():
        return None
    per_step = bad.reshape(-1, values.shape[-1]).any(axis=0)
    return int(np.argmax(per_step))


def cuba_lif_step(state: CubaLifState, x_t: Tensor, p: CubaLifParams,
                  layer: Optional[str] = None,
                  timestep: Optional[int] = None) -> Tuple[CubaLifState, Tensor]:
    """Advance the neuron state by one timestep (inference path, no recording)."""
    if x_t.shape != state.shape:
        raise DimensionError("synaptic input does not match the neuron state", x_t.shape,
                             state.shape)
    if not np.all(np.isfinite(x_t.data)):
        raise NumericError("non-finite synaptic input", layer=layer, timestep=timestep)
    u = (1.0 - p.current_decay) * state.u.data + x_t.data
    v_pre = (1.0 - p.voltage_decay) * state.v.data + u
    spikes = _heaviside(v_pre, p)
    v = v_pre * (1.0 - spikes)
    return CubaLifState(Tensor(u), Tensor(v)), Tensor(spikes)


def _check_history_budget(drive: np.ndarray, layer: Optional[str]) -> None:
    needed_mb = 3 * drive.size * np.dtype(DTYPE).itemsize / 2 ** 20
    budget_mb = settings.BPTT_MEMORY_BUDGET_MB
    if needed_mb > budget_mb:
        message = (
            f"BPTT history for {layer or 'spiking layer'} needs {needed_mb:.1f} MiB, "
            f"over the {budget_mb} MiB budget; use fewer timesteps or a smaller batch"
        )
        logger.error(message)
        raise ResourceError(message)


def cuba_lif(drive: Tensor, p: CubaLifParams, relaxed: bool = False,
             layer: Optional[str] = None) -> Tensor:
    """Run CUBA-LIF neurons over the trailing time axis of ``drive``.

    Args:
        drive: synaptic input of shape (..., T)
        p: neuron constants
        relaxed: emit the smooth surrogate-integral spike instead of a binary one
        layer: name used in error messages

    Returns:
        Spike tensor with the shape of ``drive``
    """
    x = drive.data
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ContractError(f"spiking input needs at least one timestep, got shape {drive.shape}")
    bad_step = _first_bad_timestep(x)
    if bad_step is not None:
        logger.error(f"Non-finite drive in {layer} at timestep {bad_step}")
        raise NumericError("non-finite synaptic input", layer=layer, timestep=bad_step)

    recording = is_grad_enabled() and drive.requires_grad
    if recording:
        _check_history_budget(x, layer)

    spike_fn = relaxed_spike if relaxed else _heaviside
    steps = np.ascontiguousarray(np.moveaxis(x, -1, 0))
    timesteps = steps.shape[0]
    keep_u, keep_v = 1.0 - p.current_decay, 1.0 - p.voltage_decay

    pre_reset = np.empty_like(steps)
    spikes = np.empty_like(steps)
    u = np.zeros(steps.shape[1:], dtype=DTYPE)
    v = np.zeros_like(u)
    for t in range(timesteps):
        u = keep_u * u + steps[t]
        w = keep_v * v + u
        s = spike_fn(w, p)
        v = w * (1.0 - s)
        pre_reset[t] = w
        spikes[t] = s

    def backward(g):
        grad_spikes = np.moveaxis(g, -1, 0)
        grad_drive = np.empty_like(steps)
        grad_w_next = np.zeros_like(u)
        grad_u_next = np.zeros_like(u)
        for t in range(timesteps - 1, -1, -1):
            w, s = pre_reset[t], spikes[t]
            grad_v = keep_v * grad_w_next
            grad_w = grad_v * (1.0 - s) + (grad_spikes[t] - grad_v * w) * surrogate_grad(w, p)
            grad_u = grad_w + keep_u * grad_u_next
            grad_drive[t] = grad_u
            grad_w_next, grad_u_next = grad_w, grad_u
        return (np.ascontiguousarray(np.moveaxis(grad_drive, 0, -1)),)

    out = np.ascontiguousarray(np.moveaxis(spikes, 0, -1))
    return Tensor._from_op(out, (drive,), backward, 'cuba_lif')


# ========== spiking layers ==========

def is_binary(x: Union[Tensor, np.ndarray]) -> bool:
    values = x.data if isinstance(x, Tensor) else x
    return bool(np.all((values == 0.0) | (values == 1.0)))


def _batched(x: Tensor, spatial_rank: int) -> Tuple[Tensor, bool]:
    """Add a leading batch axis to a single spike sample."""
    if x.ndim == spatial_rank:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == spatial_rank + 1:
        return x, False
    raise DimensionError(f"expected a spike tensor with {spatial_rank} non-batch axes", x.shape)


def fold_time(x: Tensor) -> Tensor:
    """(N, C, H, W, T) → (N·T, C, H, W)."""
    n, c, h, w, t = x.shape
    return reshape(permute(x, (0, 4, 1, 2, 3)), (n * t, c, h, w))


def unfold_time(x: Tensor, batch: int, timesteps: int) -> Tensor:
    """(N·T, C, H, W) → (N, C, H, W, T)."""
    _, c, h, w = x.shape
    return permute(reshape(x, (batch, timesteps, c, h, w)), (0, 2, 3, 4, 1))


def spk_conv_forward(x: Tensor, weight: Tensor, p: CubaLifParams, bias: Optional[Tensor] = None,
                     stride: int = 1, pad: int = 0, relaxed: bool = False,
                     layer: str = 'spkconv') -> Tensor:
    """Spiking convolution: per-timestep conv2d drive fed to CUBA-LIF neurons."""
    if not relaxed and not is_binary(x):
        raise ContractError(f"{layer} expects binary spikes")
    batch, single = _batched(x, 4)
    n, timesteps = batch.shape[0], batch.shape[-1]
    drive = conv2d(fold_time(batch), weight, stride=stride, pad=pad, bias=bias)
    out = cuba_lif(unfold_time(drive, n, timesteps), p, relaxed=relaxed, layer=layer)
    return reshape(out, out.shape[1:]) if single else out


def spk_dense_forward(x: Tensor, weight: Tensor, p: CubaLifParams, bias: Optional[Tensor] = None,
                      relaxed: bool = False, layer: str = 'spkdense') -> Tensor:
    """Spiking dense layer over (F, T) or (N, F, T) spikes."""
    if not relaxed and not is_binary(x):
        raise ContractError(f"{layer} expects binary spikes")
    batch, single = _batched(x, 2)
    n, features, timesteps = batch.shape
    flat = reshape(permute(batch, (0, 2, 1)), (n * timesteps, features))
    drive = dense(flat, weight, bias)
    drive = permute(reshape(drive, (n, timesteps, weight.shape[0])), (0, 2, 1))
    out = cuba_lif(drive, p, relaxed=relaxed, layer=layer)
    return reshape(out, out.shape[1:]) if single else out


def _pool_sum_threshold(x: Tensor, threshold: float, p: CubaLifParams, relaxed: bool) -> Tensor:
    """Spike where the 2×2 window holds at least ``threshold`` spikes."""
    n, c, h, w, t = x.shape
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2, t)
    counts = blocks.sum(axis=(3, 5))
    shifted = CubaLifParams(threshold=threshold, surrogate_width=p.surrogate_width)
    out = relaxed_spike(counts, shifted) if relaxed else _heaviside(counts, shifted)

    def backward(g):
        local = g * surrogate_grad(counts, shifted)
        spread = np.broadcast_to(local[:, :, :, None, :, None, :], blocks.shape)
        return (np.ascontiguousarray(spread).reshape(x.shape),)

    return Tensor._from_op(out, (x,), backward, 'spike_pool_sum_threshold')


def spike_pool(x: Tensor, mode: Optional[str] = None, threshold: Optional[float] = None,
               p: Optional[CubaLifParams] = None, relaxed: bool = False) -> Tensor:
    """2×2 spatial spike pooling applied independently at every timestep.

    The default 'or' mode spikes whenever any input in the window spiked.
    """
    mode = mode or settings.SPIKE_POOL_MODE
    if mode not in POOL_MODES:
        raise ConfigurationError(f"unknown spike pool mode {mode!r}")
    batch, single = _batched(x, 4)
    n, _, height, width, timesteps = batch.shape
    if height % 2 or width % 2:
        raise DimensionError("spike pooling needs even spatial dimensions", x.shape)

    if mode == 'or':
        out = unfold_time(maxpool2d(fold_time(batch)), n, timesteps)
    else:
        threshold = settings.SPIKE_POOL_THRESHOLD if threshold is None else threshold
        out = _pool_sum_threshold(batch, threshold, p or CubaLifParams(), relaxed)
    return reshape(out, out.shape[1:]) if single else out


def bptt_unroll(layer, x: Tensor, ctx: Optional[ForwardContext] = None) -> Tensor:
    """Record the whole sequence of a spiking layer as one differentiable graph."""
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ContractError(f"BPTT needs at least one timestep, got shape {x.shape}")
    return layer.forward(x, ctx or ForwardContext.from_settings())


def spike_rate(x: Union[Tensor, np.ndarray]) -> float:
    values = x.data if isinstance(x, Tensor) else np.asarray(x)
    return float(values.mean()) if values.size else 0.0
