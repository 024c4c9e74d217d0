"""
Bit-accurate behavioral model of the hardware accumulator.

A bank holds N saturating k-bit counters and an interval register. Each
clock adds the incoming spike vector; when the register reaches the
interval the counters are copied to the output latch and cleared in the same
tick. Layers wider than the bank are split into partitions of N neurons that
share one bank: partition p is serviced at sub-slot p of every timestep, with
its counters and interval register saved and restored around the slot.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np
from django.conf import settings

from .accumulator import AccumulatorConfig, accumulate_forward
from .exceptions import ConfigurationError, ContractError, DimensionError

logger = logging.getLogger(__name__)


def counter_bits_for(interval: int) -> int:
    """Smallest k that represents every count 0..interval (⌈log2(I+1)⌉)."""
    if interval < 1:
        raise ConfigurationError(f"interval must be >= 1, got {interval}")
    return int(interval).bit_length()


def register_bits_for(interval: int) -> int:
    """Width of the interval register counting 0..I-1 (at least one bit)."""
    return max(1, int(interval - 1).bit_length())


class CounterBank:
    """N k-bit saturating counters with clock, sync and spike ports."""

    def __init__(self, bits: int, interval: int, size: Optional[int] = None):
        if bits < 1:
            raise ConfigurationError(f"counter width must be >= 1 bit, got {bits}")
        if interval < 1:
            raise ConfigurationError(f"interval must be >= 1, got {interval}")
        self.size = size or settings.COUNTER_BANK_SIZE
        self.bits = bits
        self.interval = interval
        self.max_count = (1 << bits) - 1
        self.counters = np.zeros(self.size, dtype=np.uint32)
        self.interval_reg = 0
        self.output_latch = np.zeros(self.size, dtype=np.uint32)
        self.saturation_events = 0
        self.latch_count = 0

    @property
    def register_bits(self) -> int:
        return register_bits_for(self.interval)

    @property
    def bus_width(self) -> int:
        return self.size * self.bits

    def tick(self, spikes: np.ndarray) -> Optional[np.ndarray]:
        """One clock edge; returns the latched values when the interval completes."""
        spikes = np.asarray(spikes)
        if spikes.shape != (self.size,):
            raise DimensionError("spike vector must have one bit per counter", spikes.shape,
                                 (self.size,))
        if np.any((spikes != 0) & (spikes != 1)):
            raise ContractError("spike port only accepts single bits")
        firing = spikes.astype(bool)
        full = firing & (self.counters >= self.max_count)
        self.saturation_events += int(full.sum())
        self.counters[firing & ~full] += 1
        self.interval_reg += 1
        if self.interval_reg == self.interval:
            self.output_latch = self.counters.copy()
            self.counters[:] = 0
            self.interval_reg = 0
            self.latch_count += 1
            return self.output_latch.copy()
        return None

    def sync(self) -> None:
        """Zero the counters and the interval register; the latch keeps its value."""
        self.counters[:] = 0
        self.interval_reg = 0

    def output_bus(self) -> int:
        """The latch as one N·k-bit word, lane 0 in the least significant bits."""
        word = 0
        for lane in range(self.size - 1, -1, -1):
            word = (word << self.bits) | int(self.output_latch[lane])
        return word

    def save_context(self) -> Tuple[np.ndarray, int]:
        return self.counters.copy(), self.interval_reg

    def restore_context(self, context: Tuple[np.ndarray, int]) -> None:
        counters, register = context
        self.counters = counters.copy()
        self.interval_reg = register


def clock_tick(bank: CounterBank, spikes: np.ndarray) -> CounterBank:
    bank.tick(spikes)
    return bank


def sync(bank: CounterBank) -> CounterBank:
    bank.sync()
    return bank


@dataclass(frozen=True)
class PartitionPlan:
    """Round-robin split of M neurons into ⌈M/N⌉ bank-sized partitions."""

    neurons: int
    timesteps: int
    bank_size: int = 128

    def __post_init__(self):
        if self.neurons < 0 or self.timesteps < 1 or self.bank_size < 1:
            raise ConfigurationError(
                f"invalid partition plan: M={self.neurons}, T={self.timesteps}, N={self.bank_size}"
            )

    @classmethod
    def for_layer(cls, neurons: int, timesteps: int) -> 'PartitionPlan':
        return cls(neurons, timesteps, settings.COUNTER_BANK_SIZE)

    @property
    def partitions(self) -> int:
        return -(-self.neurons // self.bank_size)

    @property
    def padded_lanes(self) -> int:
        return self.partitions * self.bank_size - self.neurons

    @property
    def cycles(self) -> int:
        return self.partitions * self.timesteps

    def lanes(self, partition: int) -> slice:
        start = partition * self.bank_size
        return slice(start, min(start + self.bank_size, self.neurons))

    def schedule(self) -> Iterator[Tuple[int, int, int]]:
        """(cycle, timestep, partition) in service order."""
        for t in range(self.timesteps):
            for p in range(self.partitions):
                yield t * self.partitions + p, t, p


@dataclass
class LayerRunResult:
    counts: np.ndarray
    saturation_events: int
    latch_count: int
    stimulus: List[Tuple[int, np.ndarray]] = field(default_factory=list)
    latches: List[Tuple[int, np.ndarray]] = field(default_factory=list)

    @property
    def flattened(self) -> np.ndarray:
        """Group-major, neuron-minor word order (the accumulator's channel layout)."""
        return np.ascontiguousarray(self.counts.T).reshape(-1)


def run_layer(spikes: np.ndarray, plan: PartitionPlan, interval: int,
              bits: Optional[int] = None, record_trace: bool = False) -> LayerRunResult:
    """Time-multiplex a layer's (M, T) spike bits through one counter bank.

    Returns:
        Counts of shape (M, T/I) with padding lanes dropped
    """
    spikes = np.asarray(spikes)
    if spikes.shape != (plan.neurons, plan.timesteps):
        raise ConfigurationError(
            f"spike matrix {spikes.shape} does not fit the plan "
            f"({plan.neurons} neurons × {plan.timesteps} timesteps)"
        )
    config = AccumulatorConfig(interval, plan.timesteps)
    bits = counter_bits_for(interval) if bits is None else bits
    bank = CounterBank(bits, interval, plan.bank_size)

    padded = np.zeros((plan.partitions * plan.bank_size, plan.timesteps), dtype=np.uint8)
    padded[:plan.neurons] = spikes
    contexts = [bank.save_context() for _ in range(plan.partitions)]
    counts = np.zeros((plan.neurons, config.groups), dtype=np.int64)
    result = LayerRunResult(counts, 0, 0)

    for cycle, t, p in plan.schedule():
        lanes = padded[p * plan.bank_size:(p + 1) * plan.bank_size, t]
        bank.restore_context(contexts[p])
        latched = bank.tick(lanes)
        contexts[p] = bank.save_context()
        if record_trace:
            result.stimulus.append((cycle, lanes.copy()))
        if latched is not None:
            span = plan.lanes(p)
            counts[span, t // interval] = latched[:span.stop - span.start]
            if record_trace:
                result.latches.append((cycle, latched))

    result.saturation_events = bank.saturation_events
    result.latch_count = bank.latch_count
    if result.saturation_events:
        logger.warning(f"{result.saturation_events} saturating increments with {bits}-bit counters "
                       f"at I={interval}")
    return result


@dataclass
class Verification:
    passed: bool
    mismatches: int
    saturation_events: int
    result: LayerRunResult


def verify_layer(spikes: np.ndarray, interval: int, bits: Optional[int] = None,
                 bank_size: Optional[int] = None, record_trace: bool = False) -> Verification:
    """Compare the bank simulation with the software accumulator bit for bit."""
    neurons, timesteps = spikes.shape
    plan = PartitionPlan(neurons, timesteps, bank_size or settings.COUNTER_BANK_SIZE)
    result = run_layer(spikes, plan, interval, bits, record_trace)
    expected = accumulate_forward(spikes.astype(np.float64),
                                  AccumulatorConfig(interval, timesteps)).data
    mismatches = int(np.count_nonzero(result.flattened != expected.astype(np.int64)))
    return Verification(mismatches == 0 and result.saturation_events == 0, mismatches,
                        result.saturation_events, result)


# ========== trace files ==========

def _hex_digits(bit_count: int) -> int:
    return max(1, -(-bit_count // 4))


def bits_to_hex(vector: np.ndarray) -> str:
    word = 0
    for bit in vector[::-1]:
        word = (word << 1) | int(bit)
    return f"{word:0{_hex_digits(len(vector))}x}"


def hex_to_bits(text: str, width: int) -> np.ndarray:
    word = int(text, 16)
    return np.array([(word >> lane) & 1 for lane in range(width)], dtype=np.uint8)


def write_stimulus_trace(path: Union[str, Path], stimulus: List[Tuple[int, np.ndarray]]) -> Path:
    """One line per tick: ``tick hexvector`` (lane 0 is the least significant bit)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(''.join(f"{tick} {bits_to_hex(vector)}\n" for tick, vector in stimulus))
    return path


def write_latch_trace(path: Union[str, Path], latches: List[Tuple[int, np.ndarray]],
                      bits: int) -> Path:
    """One line per latch event: ``tick v0 v1 ... vN-1`` as k-bit hex values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    digits = _hex_digits(bits)
    lines = [f"{tick} " + ' '.join(f"{int(v):0{digits}x}" for v in values) + '\n'
             for tick, values in latches]
    path.write_text(''.join(lines))
    return path


def read_stimulus_trace(path: Union[str, Path], width: int) -> List[Tuple[int, np.ndarray]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            tick, vector = line.split()
            rows.append((int(tick), hex_to_bits(vector, width)))
    return rows


def read_latch_trace(path: Union[str, Path]) -> List[Tuple[int, np.ndarray]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            tick, *values = line.split()
            rows.append((int(tick), np.array([int(v, 16) for v in values], dtype=np.uint32)))
    return rows


def replay_stimulus(stimulus: List[Tuple[int, np.ndarray]], bits: int, interval: int,
                    size: int) -> List[Tuple[int, np.ndarray]]:
    """Drive a fresh single-partition bank with a stimulus trace and collect its latches."""
    bank = CounterBank(bits, interval, size)
    latches = []
    for tick, vector in stimulus:
        latched = bank.tick(vector)
        if latched is not None:
            latches.append((tick, latched))
    return latches


# ========== cost ==========

@dataclass(frozen=True)
class TickEnergyModel:
    """User-supplied calibration of the bank's switching energy."""

    energy_per_tick: float
    energy_per_latch_bit: float
    bank_count: int = 1


@dataclass(frozen=True)
class HwCost:
    cycles: int
    latches: int
    latency: float
    energy: float

    @property
    def power(self) -> float:
        return self.energy / self.latency if self.latency > 0 else 0.0


def hw_cost(plan: PartitionPlan, interval: int, clock_hz: float,
            energy_model: TickEnergyModel, bits: Optional[int] = None) -> HwCost:
    """Latency, energy and power of accumulating one sample of a layer."""
    if clock_hz <= 0:
        raise ConfigurationError(f"clock must be positive, got {clock_hz}")
    bits = counter_bits_for(interval) if bits is None else bits
    banks = max(1, energy_model.bank_count)
    cycles = -(-plan.partitions // banks) * plan.timesteps
    ticks = plan.partitions * plan.timesteps
    latches = plan.partitions * (plan.timesteps // interval)
    energy = (ticks * energy_model.energy_per_tick
              + latches * plan.bank_size * bits * energy_model.energy_per_latch_bit)
    return HwCost(cycles, latches, cycles / clock_hz, energy)
