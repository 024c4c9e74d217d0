"""
Spike accumulator: the bridge from the spiking backbone to the non-spiking head.

Forward sums the spikes of every channel over consecutive groups of ``I``
timesteps and lays the groups out along the channel axis, group-major and
channel-minor::

    A[j, ...] = sum_{k<I} S[j mod C, ..., I*floor(j/C) + k]

Backward repeats each incoming gradient ``I`` times in place, so spikes that
were summed together share the same gradient. The group-major layout is also
the word order of the hardware counter bank (see ``counter_bank``).
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from django.conf import settings

from .autodiff import DTYPE, Tensor
from .exceptions import ConfigurationError, ContractError, DimensionError
from .spiking import is_binary

logger = logging.getLogger(__name__)

ArrayOrTensor = Union[Tensor, np.ndarray]


@dataclass(frozen=True)
class AccumulatorConfig:
    """Accumulate interval ``I`` over an input of ``T`` timesteps."""

    interval: int
    timesteps: int
    pad_final_group: bool = False

    def __post_init__(self):
        if self.interval < 1 or self.timesteps < 1:
            raise ConfigurationError(
                "interval and timesteps must be positive, "
                f"got I={self.interval}, T={self.timesteps}"
            )
        if self.interval > self.timesteps:
            raise ConfigurationError(
                f"interval {self.interval} exceeds the {self.timesteps} input timesteps"
            )
        if self.timesteps % self.interval and not self.pad_final_group:
            raise ConfigurationError(
                f"interval {self.interval} does not divide {self.timesteps} timesteps"
            )

    @classmethod
    def create(cls, interval: int, timesteps: int,
               pad_final_group: Optional[bool] = None) -> 'AccumulatorConfig':
        if pad_final_group is None:
            pad_final_group = settings.ACCUMULATOR_PAD_FINAL_GROUP
        return cls(interval, timesteps, pad_final_group)

    @property
    def groups(self) -> int:
        return -(-self.timesteps // self.interval)

    @property
    def padded_timesteps(self) -> int:
        return self.groups * self.interval

    def output_channels(self, channels: int) -> int:
        return channels * self.groups


def _data(x: ArrayOrTensor) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


def _forward_array(s: np.ndarray, cfg: AccumulatorConfig, lead: int) -> np.ndarray:
    if s.shape[-1] != cfg.timesteps:
        raise DimensionError(
            f"accumulator configured for T={cfg.timesteps} received a different time axis",
            s.shape, (cfg.timesteps,),
        )
    if cfg.padded_timesteps != cfg.timesteps:
        padding = [(0, 0)] * (s.ndim - 1) + [(0, cfg.padded_timesteps - cfg.timesteps)]
        s = np.pad(s, padding)
    head = s.shape[:lead]
    channels = s.shape[lead]
    spatial = s.shape[lead + 1:-1]
    summed = s.reshape(s.shape[:-1] + (cfg.groups, cfg.interval)).sum(axis=-1)
    grouped = np.moveaxis(summed, -1, lead)
    return np.ascontiguousarray(grouped).reshape(head + (cfg.groups * channels,) + spatial)


def _backward_array(grad: np.ndarray, cfg: AccumulatorConfig, lead: int) -> np.ndarray:
    expanded = grad.shape[lead] if grad.ndim > lead else 0
    if expanded == 0 or expanded % cfg.groups:
        raise DimensionError(
            f"gradient channel axis is not a multiple of the {cfg.groups} interval groups",
            grad.shape,
        )
    head = grad.shape[:lead]
    channels = expanded // cfg.groups
    spatial = grad.shape[lead + 1:]
    split = grad.reshape(head + (cfg.groups, channels) + spatial)
    repeated = np.repeat(np.moveaxis(split, lead, -1), cfg.interval, axis=-1)
    return np.ascontiguousarray(repeated[..., :cfg.timesteps])


def accumulate_forward(s: ArrayOrTensor, cfg: AccumulatorConfig, strict: bool = True,
                       batched: bool = False) -> Tensor:
    """Collapse time into expanded channels: (C, *sp, T) → (C·T/I, *sp).

    Args:
        s: spike tensor, with a leading batch axis when ``batched`` is set
        cfg: interval configuration
        strict: reject non-binary input (the relaxed training mode passes False)
        batched: treat axis 0 as the batch axis

    Returns:
        Accumulated tensor, recorded for backward when ``s`` requires grad
    """
    source = s if isinstance(s, Tensor) else Tensor(s)
    lead = 1 if batched else 0
    if source.ndim < lead + 2:
        raise DimensionError("accumulator input needs a channel and a time axis", source.shape)
    if strict and not is_binary(source):
        raise ContractError("accumulator expects binary spikes")
    out = _forward_array(source.data, cfg, lead)

    def backward(g):
        return (_backward_array(g, cfg, lead),)

    return Tensor._from_op(out, (source,), backward, 'accumulate')


def accumulate_backward(grad: ArrayOrTensor, cfg: AccumulatorConfig,
                        batched: bool = False) -> np.ndarray:
    """Repeat each accumulated gradient over the ``I`` timesteps it summed."""
    return _backward_array(_data(grad), cfg, 1 if batched else 0)


# ========== scalar references and adjoint verification ==========

def reference_forward(s: np.ndarray, cfg: AccumulatorConfig) -> np.ndarray:
    """Direct element-by-element evaluation of the accumulation sum."""
    channels = s.shape[0]
    spatial = s.shape[1:-1]
    out = np.zeros((channels * cfg.groups,) + spatial, dtype=DTYPE)
    for j in range(out.shape[0]):
        for site in np.ndindex(*spatial):
            total = 0.0
            for k in range(cfg.interval):
                t = cfg.interval * (j // channels) + k
                if t < cfg.timesteps:
                    total += s[(j % channels,) + site + (t,)]
            out[(j,) + site] = total
    return out


def reference_backward(grad: np.ndarray, cfg: AccumulatorConfig) -> np.ndarray:
    """Direct element-by-element evaluation of the repeated-gradient rule."""
    channels = grad.shape[0] // cfg.groups
    spatial = grad.shape[1:]
    out = np.zeros((channels,) + spatial + (cfg.timesteps,), dtype=DTYPE)
    for i in range(channels):
        for site in np.ndindex(*spatial):
            for t in range(cfg.timesteps):
                out[(i,) + site + (t,)] = grad[(channels * (t // cfg.interval) + i,) + site]
    return out


@dataclass(frozen=True)
class JacobianCheckResult:
    ok: bool
    index: Optional[Tuple[int, ...]] = None
    side: Optional[str] = None

    def __bool__(self) -> bool:
        return self.ok


def jacobian_check(cfg: AccumulatorConfig, channels: int, height: int, width: int,
                   trials: int = 1, seed: int = 0) -> JacobianCheckResult:
    """Verify that backward is the exact adjoint of forward on random integer pairs.

    Integer-valued inputs keep every inner product exact in float64. On failure
    the first disagreeing element against the scalar references is reported.
    """
    in_shape = (channels, height, width, cfg.timesteps)
    out_shape = (cfg.output_channels(channels), height, width)
    if int(np.prod(in_shape)) > 10_000:
        raise ContractError(f"jacobian_check is meant for small tensors, got {in_shape}")
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        x = rng.integers(-8, 9, size=in_shape).astype(DTYPE)
        y = rng.integers(-8, 9, size=out_shape).astype(DTYPE)
        forward = _forward_array(x, cfg, 0)
        backward = _backward_array(y, cfg, 0)
        if np.vdot(forward, y) == np.vdot(x, backward):
            continue
        expected_forward = reference_forward(x, cfg)
        mismatch = np.argwhere(forward != expected_forward)
        if mismatch.size:
            logger.warning(f"Accumulator forward disagrees at {tuple(mismatch[0])}")
            return JacobianCheckResult(False, tuple(int(i) for i in mismatch[0]), 'forward')
        mismatch = np.argwhere(backward != reference_backward(y, cfg))
        index = tuple(int(i) for i in mismatch[0]) if mismatch.size else None
        logger.warning(f"Accumulator backward disagrees at {index}")
        return JacobianCheckResult(False, index, 'backward')
    return JacobianCheckResult(True)
