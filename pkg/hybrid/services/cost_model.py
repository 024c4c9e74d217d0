"""
Analytical deployment cost of hybrid models on a neuromorphic chip + edge accelerator.

The spiking layers are mapped onto neuro-cores and charged per synaptic
event (presynaptic spikes measured on a sample batch × fan-out) plus a per-core
overhead every timestep. The non-spiking head is charged per MAC and per
weight fetched, with a fixed dispatch cost per layer and idle power over its
latency. The accumulator cost comes from the counter-bank model.

Every component stores latency and power; its energy is their product.
"""
import json
import logging
import math
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from django.conf import settings

from .autodiff import Tensor, no_grad
from .counter_bank import PartitionPlan, TickEnergyModel, counter_bits_for, hw_cost
from .event_io import synth_gestures
from .exceptions import ConfigurationError, VerificationError
from .layers import Accumulate
from .model_factory import BuiltModel, build_named, table_reference
from .spiking import ForwardContext

logger = logging.getLogger(__name__)

COMPONENTS = ('neuromorphic', 'accumulator', 'edge', 'link')
CONSISTENCY_RTOL = 1e-9


@dataclass(frozen=True)
class NeuromorphicProfile:
    name: str
    neurons_per_core: int
    cores_per_chip: int
    synapses_per_chip: float
    energy_per_synaptic_event: float
    core_overhead_energy: float
    timestep_latency: float
    core_latency: float


@dataclass(frozen=True)
class EdgeProfile:
    name: str
    energy_per_mac: float
    energy_per_parameter: float
    layer_overhead_energy: float
    layer_overhead_latency: float
    idle_power: float
    clock_hz: float
    mac_units: int
    memory_bandwidth: float
    bytes_per_parameter: int

    @property
    def throughput(self) -> float:
        return self.clock_hz * self.mac_units


@dataclass(frozen=True)
class AccumulatorProfile:
    name: str
    clock_hz: float
    energy_per_tick: float
    energy_per_latch_bit: float
    bank_size: int
    bank_count: int

    def tick_model(self) -> TickEnergyModel:
        return TickEnergyModel(self.energy_per_tick, self.energy_per_latch_bit, self.bank_count)


@dataclass(frozen=True)
class LinkProfile:
    name: str = 'link'
    energy_per_byte: float = 0.0
    latency_per_byte: float = 0.0


@dataclass(frozen=True)
class ProfileSet:
    neuromorphic: NeuromorphicProfile
    edge: EdgeProfile
    accumulator: AccumulatorProfile
    link: LinkProfile = field(default_factory=LinkProfile)
    provenance: str = ''


_PROFILE_TYPES = {
    'neuromorphic': NeuromorphicProfile,
    'edge': EdgeProfile,
    'accumulator': AccumulatorProfile,
    'link': LinkProfile,
}


def _required_fields(profile_cls) -> List[str]:
    return [f.name for f in fields(profile_cls)
            if f.default is MISSING and f.default_factory is MISSING]


def profiles_from_dict(data: Dict) -> ProfileSet:
    """Build a ProfileSet, listing every absent field in one ConfigurationError."""
    missing = []
    built = {}
    for section, profile_cls in _PROFILE_TYPES.items():
        values = data.get(section)
        if values is None:
            if section == 'link':
                built[section] = LinkProfile()
                continue
            missing.append(section)
            continue
        absent = [f"{section}.{name}" for name in _required_fields(profile_cls)
                  if name not in values]
        if absent:
            missing.extend(absent)
            continue
        known = {f.name for f in fields(profile_cls)}
        built[section] = profile_cls(**{k: v for k, v in values.items() if k in known})
    if missing:
        raise ConfigurationError("device profile is incomplete", missing_fields=missing)
    return ProfileSet(provenance=data.get('_provenance', ''), **built)


def load_profiles(path: Optional[Union[str, Path]] = None) -> ProfileSet:
    path = Path(path or settings.DEFAULT_PROFILE_PATH)
    return profiles_from_dict(json.loads(path.read_text()))


# ========== core allocation ==========

@dataclass
class CoreAllocation:
    per_layer: Dict[str, int]
    total: int
    chips: int
    synapses: int
    multi_chip: bool
    synapse_budget_exceeded: bool


def allocate_cores(census: Dict[str, int], profile: NeuromorphicProfile,
                   synapses: Optional[Dict[str, int]] = None) -> CoreAllocation:
    """⌈neurons / neurons_per_core⌉ cores per spiking layer."""
    per_layer = {name: -(-count // profile.neurons_per_core) for name, count in census.items()}
    total = sum(per_layer.values())
    chips = max(1, -(-total // profile.cores_per_chip)) if total else 0
    synapse_total = sum((synapses or {}).values())
    multi_chip = total > profile.cores_per_chip
    over_budget = synapse_total > profile.synapses_per_chip * max(chips, 1)
    if multi_chip:
        logger.warning(f"{total} cores exceed one chip of {profile.cores_per_chip}; "
                       f"mapping needs {chips} chips")
    if over_budget:
        logger.warning(f"{synapse_total} synapses exceed the budget of {chips} chip(s)")
    return CoreAllocation(per_layer, total, chips, synapse_total, multi_chip, over_budget)


def _synapse_counts(model: BuiltModel) -> Dict[str, int]:
    counts = {}
    for layer in model.spiking_layers:
        weight = layer.params.get('weight')
        fan_in = int(np.prod(weight.shape[1:])) if weight is not None else 0
        counts[layer.name] = layer.neurons * fan_in
    return counts


# ========== component costs ==========

@dataclass
class ComponentCost:
    name: str
    latency: float
    power: float

    @property
    def energy(self) -> float:
        return self.power * self.latency

    @classmethod
    def from_energy(cls, name: str, latency: float, energy: float) -> 'ComponentCost':
        return cls(name, latency, energy / latency if latency > 0 else 0.0)


@dataclass
class CostReport:
    model: str
    interval: Optional[int]
    timesteps: int
    components: Dict[str, ComponentCost]
    allocation: CoreAllocation
    counts: Dict[str, float] = field(default_factory=dict)
    annotations: Dict = field(default_factory=dict)

    @property
    def latency(self) -> float:
        return sum(c.latency for c in self.components.values())

    @property
    def energy(self) -> float:
        return sum(c.energy for c in self.components.values())

    @property
    def power(self) -> float:
        return self.energy / self.latency if self.latency > 0 else 0.0

    @property
    def key(self) -> str:
        return f"{self.model}_I{self.interval}" if self.interval else self.model

    def to_records(self) -> List[Dict]:
        head = {'model': self.model, 'interval': self.interval, 'timesteps': self.timesteps}
        records = []
        for name in COMPONENTS:
            cost = self.components[name]
            records.append({**head, 'record': 'component', 'component': name,
                            'latency_s': cost.latency, 'power_w': cost.power,
                            'energy_j': cost.energy})
        records.append({**head, 'record': 'total', 'component': 'total',
                        'latency_s': self.latency, 'power_w': self.power,
                        'energy_j': self.energy})
        records.append({**head, 'record': 'allocation', **asdict(self.allocation)})
        records.append({**head, 'record': 'counts', **self.counts})
        records.append({**head, 'record': 'annotations', **self.annotations})
        return records


def measure_activity(model: BuiltModel, frames: np.ndarray) -> Dict[str, float]:
    """Presynaptic spikes per sample entering each spiking layer."""
    if not model.spiking_layers or len(frames) == 0:
        return {}
    ctx = ForwardContext.from_settings()
    with no_grad():
        model.forward(Tensor(frames.astype(np.float64)), ctx)
    return {name: entry['input_spikes'] / len(frames) for name, entry in ctx.activity.items()}


def default_sample_batch(model: BuiltModel, samples_per_class: int = 1,
                         seed: int = 0) -> np.ndarray:
    return synth_gestures(model.spec.class_count, samples_per_class, model.spec.input_shape,
                          seed).frames


def estimate(model: BuiltModel, profiles: ProfileSet, frames: Optional[np.ndarray] = None,
             activity: Optional[Dict[str, float]] = None) -> CostReport:
    """Per-component latency, power and energy of one inference sample."""
    spec = model.spec
    timesteps = spec.timesteps
    neuro, edge = profiles.neuromorphic, profiles.edge

    census = model.neuron_counts
    allocation = allocate_cores(census, neuro, _synapse_counts(model))
    if activity is None:
        if frames is None:
            frames = default_sample_batch(model)
        activity = measure_activity(model, frames)
    events = sum(activity.get(layer.name, 0.0) * layer.fan_out for layer in model.spiking_layers)

    if census:
        neuro_latency = timesteps * (neuro.timestep_latency + neuro.core_latency * allocation.total)
        neuro_energy = (events * neuro.energy_per_synaptic_event
                        + neuro.core_overhead_energy * allocation.total * timesteps)
    else:
        neuro_latency = neuro_energy = 0.0

    ann_layers = model.ann_layers
    macs = sum(layer.macs for layer in ann_layers)
    params = sum(layer.parameter_count for layer in ann_layers)
    if ann_layers:
        edge_latency = (len(ann_layers) * edge.layer_overhead_latency + macs / edge.throughput
                        + params * edge.bytes_per_parameter / edge.memory_bandwidth)
        edge_energy = (macs * edge.energy_per_mac + params * edge.energy_per_parameter
                       + len(ann_layers) * edge.layer_overhead_energy
                       + edge.idle_power * edge_latency)
    else:
        edge_latency = edge_energy = 0.0

    acc_latency = acc_energy = 0.0
    link_bytes = 0
    if model.accumulator_index is not None:
        acc_layer: Accumulate = model.layers[model.accumulator_index]
        source = acc_layer.in_shape
        plan = PartitionPlan(int(np.prod(source[:-1])), timesteps, profiles.accumulator.bank_size)
        cost = hw_cost(plan, spec.interval, profiles.accumulator.clock_hz,
                       profiles.accumulator.tick_model(), counter_bits_for(spec.interval))
        acc_latency, acc_energy = cost.latency, cost.energy
        link_bytes = int(np.prod(acc_layer.out_shape))

    link = profiles.link
    link_latency = link_bytes * link.latency_per_byte
    link_energy = link_bytes * link.energy_per_byte

    components = {
        'neuromorphic': ComponentCost.from_energy('neuromorphic', neuro_latency, neuro_energy),
        'accumulator': ComponentCost.from_energy('accumulator', acc_latency, acc_energy),
        'edge': ComponentCost.from_energy('edge', edge_latency, edge_energy),
        'link': ComponentCost.from_energy('link', link_latency, link_energy),
    }
    reference = table_reference(spec.model)
    report = CostReport(
        model=spec.model,
        interval=None if spec.is_snn else spec.interval,
        timesteps=timesteps,
        components=components,
        allocation=allocation,
        counts={'synaptic_events': float(events), 'macs': float(macs),
                'ann_parameters': float(params), 'ann_layers': float(len(ann_layers)),
                'parameters': float(model.parameter_count)},
        annotations={'reference_cores': reference.get('cores'),
                     'reference_parameters': reference.get('parameters', {}).get(spec.interval)
                     if not spec.is_snn else reference.get('parameters', {}).get(5)},
    )
    logger.info(f"{report.key}: energy={report.energy:.4e} J latency={report.latency:.4e} s")
    return report


# ========== sweeps and orderings ==========

def sweep(models: Sequence[str], intervals: Sequence[int], profiles: ProfileSet,
          input_shape: Optional[Sequence[int]] = None, class_count: Optional[int] = None,
          seed: int = 0) -> List[CostReport]:
    """One report per (model, interval); the SNN baseline is reported once."""
    shape = tuple(input_shape or settings.SWEEP_INPUT_SHAPE)
    reports = []
    for name in models:
        for interval in ([None] if name == 'snn' else intervals):
            model = build_named(name, interval, shape, class_count, seed=seed)
            reports.append(estimate(model, profiles))
    return reports


@dataclass
class OrderingCheck:
    name: str
    passed: bool
    detail: str


def _find(reports: Iterable[CostReport], model: str,
          interval: Optional[int]) -> Optional[CostReport]:
    for report in reports:
        if report.model == model and (model == 'snn' or report.interval == interval):
            return report
    return None


def check_orderings(reports: List[CostReport], interval: int = 5) -> List[OrderingCheck]:
    """Qualitative orderings expected of the default calibration."""
    checks = []

    worst = max((r.components['accumulator'].energy / r.energy for r in reports if r.energy),
                default=0.0)
    checks.append(OrderingCheck('accumulator_share', worst < 1e-3,
                                f"largest accumulator/system energy ratio {worst:.3e}"))

    hybrids = [_find(reports, f"s{k}a{5 - k}", interval) for k in range(1, 6)]
    if all(hybrids):
        energies = [r.energy for r in hybrids]
        decreasing = all(a > b for a, b in zip(energies[:4], energies[1:4]))
        checks.append(OrderingCheck(
            'hybrid_energy_by_k', decreasing and energies[4] > energies[3],
            'energies k=1..5: ' + ', '.join(f"{e:.6e}" for e in energies),
        ))

    ann, snn = _find(reports, 'ann', interval), _find(reports, 'snn', None)
    if ann and snn:
        spiking_power = snn.components['neuromorphic'].power
        ann_power = ann.components['edge'].power
        checks.append(OrderingCheck('spiking_power_below_ann', spiking_power < ann_power,
                                    f"spiking {spiking_power:.4e} W vs ANN {ann_power:.4e} W"))

    by_model: Dict[str, List[CostReport]] = {}
    for report in reports:
        if report.model != 'snn':
            by_model.setdefault(report.model, []).append(report)
    for model, group in sorted(by_model.items()):
        group = sorted(group, key=lambda r: r.interval)
        if len(group) > 1:
            energies = [r.components['edge'].energy for r in group]
            checks.append(OrderingCheck(
                f"{model}_edge_energy_by_interval",
                all(a > b for a, b in zip(energies, energies[1:])),
                ', '.join(f"I={r.interval}: {e:.6e}" for r, e in zip(group, energies)),
            ))

    for report in reports:
        for record in report.to_records():
            if record['record'] in ('component', 'total') and not energy_consistent(record):
                message = f"{record['component']} violates energy=power×latency"
                checks.append(OrderingCheck(f"{report.key}_consistency", False, message))
    return checks


def energy_consistent(record: Dict) -> bool:
    expected = record['power_w'] * record['latency_s']
    return math.isclose(record['energy_j'], expected, rel_tol=CONSISTENCY_RTOL, abs_tol=0.0) or (
        expected == 0.0 and record['energy_j'] == 0.0
    )


# ========== report files ==========

def format_table(report: CostReport) -> str:
    lines = [
        f"model {report.model} interval {report.interval} timesteps {report.timesteps}",
        f"{'component':<14}{'latency_s':>26}{'power_w':>26}{'energy_j':>26}",
    ]
    for record in report.to_records():
        if record['record'] in ('component', 'total'):
            lines.append(f"{record['component']:<14}{record['latency_s']:>26.17g}"
                         f"{record['power_w']:>26.17g}{record['energy_j']:>26.17g}")
    allocation = report.allocation
    lines.append(f"cores {allocation.total} chips {allocation.chips} "
                 f"multi_chip {allocation.multi_chip}")
    for name, cores in allocation.per_layer.items():
        lines.append(f"  {name:<12}{cores:>8}")
    for key, value in report.annotations.items():
        lines.append(f"reference {key} {value}")
    return '\n'.join(lines) + '\n'


def emit_report(report: CostReport, stem: Union[str, Path],
                formats: Sequence[str] = ('text', 'jsonl')) -> List[Path]:
    """Write ``<stem>.txt`` and/or ``<stem>.jsonl``; fields appear in a fixed order."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    written = []
    if 'text' in formats:
        path = stem.with_suffix('.txt')
        path.write_text(format_table(report))
        written.append(path)
    if 'jsonl' in formats:
        path = stem.with_suffix('.jsonl')
        path.write_text(''.join(json.dumps(r) + '\n' for r in report.to_records()))
        written.append(path)
    return written


def report_from_records(records: List[Dict]) -> CostReport:
    head = records[0]
    components, allocation, counts, annotations = {}, None, {}, {}
    strip = ('model', 'interval', 'timesteps', 'record')
    for record in records:
        kind = record['record']
        if kind in ('component', 'total') and not energy_consistent(record):
            raise VerificationError(
                f"{record['component']} energy {record['energy_j']} != power × latency"
            )
        if kind == 'component':
            components[record['component']] = ComponentCost(
                record['component'], record['latency_s'], record['power_w'])
        elif kind == 'allocation':
            allocation = CoreAllocation(**{k: v for k, v in record.items() if k not in strip})
        elif kind == 'counts':
            counts = {k: v for k, v in record.items() if k not in strip}
        elif kind == 'annotations':
            annotations = {k: v for k, v in record.items() if k not in strip}
    return CostReport(head['model'], head['interval'], head['timesteps'], components, allocation,
                      counts, annotations)


def read_report(path: Union[str, Path]) -> CostReport:
    records = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    return report_from_records(records)


def read_table_totals(path: Union[str, Path]) -> Dict[str, Tuple[float, float, float]]:
    """(latency, power, energy) per component row of a text report."""
    rows = {}
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if len(parts) == 4 and parts[0] in COMPONENTS + ('total',):
            rows[parts[0]] = tuple(float(v) for v in parts[1:])
    return rows
