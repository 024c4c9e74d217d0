"""
Management command to run the counter-bank model against the software accumulator.
"""
import json
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from django.conf import settings

from hybrid.management.base import HybridCommand
from hybrid.services.autodiff import Tensor, no_grad
from hybrid.services.checkpoint import load_checkpoint
from hybrid.services.cost_model import default_sample_batch, load_profiles
from hybrid.services.counter_bank import (
    PartitionPlan,
    counter_bits_for,
    hw_cost,
    verify_layer,
    write_latch_trace,
    write_stimulus_trace,
)
from hybrid.services.event_io import read_dataset
from hybrid.services.exceptions import ContractError, VerificationError
from hybrid.services.spiking import ForwardContext

STIMULUS_NAME = 'stimulus.trace'
LATCH_NAME = 'latch.trace'
VERDICT_NAME = 'verdict.json'


def checkpoint_stimulus(checkpoint: str, data: Optional[str] = None,
                        sample: int = 0) -> Tuple[np.ndarray, int]:
    """Spikes (neurons, T) reaching the accumulator of a trained model, plus its interval."""
    model = load_checkpoint(checkpoint).restore()
    if model.accumulator_index is None:
        raise ContractError(f"{model.spec.model} has no accumulator to simulate")
    if data:
        frames = read_dataset(data).frames[sample:sample + 1]
    else:
        frames = default_sample_batch(model)[sample:sample + 1]
    x = Tensor(frames.astype(np.float64))
    ctx = ForwardContext.from_settings()
    with no_grad():
        for layer in model.layers[:model.accumulator_index]:
            x = layer.forward(x, ctx)
    spikes = x.data[0]
    return spikes.reshape(-1, spikes.shape[-1]).astype(np.uint8), model.spec.interval


class Command(HybridCommand):
    help = 'Simulate the hardware accumulator bit-exactly and write stimulus/latch traces'
    command_name = 'simulate_hw'

    def add_run_arguments(self, parser):
        parser.add_argument(
            '--checkpoint',
            type=str,
            default=None,
            help='Drive the bank with the spikes a trained model feeds its accumulator'
        )
        parser.add_argument('--data', type=str, default=None,
                            help='Dataset directory supplying the checkpoint stimulus sample')
        parser.add_argument('--sample', type=int, default=None)
        parser.add_argument('--interval', type=int, default=None,
                            help='Accumulate interval I for random stimulus. Default: 10')
        parser.add_argument('--neurons', type=int, default=None,
                            help='Layer width for random stimulus. Default: 300')
        parser.add_argument('--timesteps', type=int, default=None,
                            help='Timesteps of random stimulus. Default: 50')
        parser.add_argument('--density', type=float, default=None,
                            help='Spike probability of random stimulus. Default: 0.5')
        parser.add_argument(
            '--bits',
            type=int,
            default=None,
            help='Override the counter width (default: smallest width holding I)'
        )
        parser.add_argument('--bank-size', type=int, default=None)
        parser.add_argument('--seed', type=int, default=None)
        parser.add_argument('--out', type=str, default=None, help='Trace directory')

    def default_options(self):
        return {
            'checkpoint': None,
            'data': None,
            'sample': 0,
            'interval': 10,
            'neurons': 300,
            'timesteps': 50,
            'density': 0.5,
            'bits': None,
            'bank_size': settings.COUNTER_BANK_SIZE,
            'seed': 0,
            'out': str(Path(settings.TRACES_DIR) / 'simulate_hw'),
        }

    def run(self, config):
        if config['checkpoint']:
            spikes, interval = checkpoint_stimulus(config['checkpoint'], config['data'],
                                                   config['sample'])
            config['interval'] = interval
        else:
            if config['neurons'] < 0 or config['timesteps'] < 1:
                raise self.usage_error("--neurons must be >= 0 and --timesteps >= 1")
            if not 0.0 <= config['density'] <= 1.0:
                raise self.usage_error(f"--density must lie in [0, 1], got {config['density']}")
            rng = np.random.default_rng(config['seed'])
            shape = (config['neurons'], config['timesteps'])
            spikes = (rng.random(shape) < config['density']).astype(np.uint8)
            interval = config['interval']

        bits = config['bits'] if config['bits'] is not None else counter_bits_for(interval)
        neurons, timesteps = spikes.shape
        self.stdout.write(f"Simulating {neurons} neurons × {timesteps} timesteps, "
                          f"I={interval}, {bits}-bit counters")
        verdict = verify_layer(spikes, interval, bits, config['bank_size'], record_trace=True)

        out = Path(config['out'])
        out.mkdir(parents=True, exist_ok=True)
        stimulus = write_stimulus_trace(out / STIMULUS_NAME, verdict.result.stimulus)
        latches = write_latch_trace(out / LATCH_NAME, verdict.result.latches, bits)
        plan = PartitionPlan(neurons, timesteps, config['bank_size'])
        cost = hw_cost(plan, interval, settings.ACCUMULATOR_CLOCK_HZ,
                       load_profiles().accumulator.tick_model(), bits)
        record = {
            'passed': verdict.passed,
            'mismatches': verdict.mismatches,
            'saturation_events': verdict.saturation_events,
            'latch_events': verdict.result.latch_count,
            'neurons': neurons,
            'timesteps': timesteps,
            'interval': interval,
            'bits': bits,
            'partitions': plan.partitions,
            'cycles': cost.cycles,
            'latency_s': cost.latency,
            'energy_j': cost.energy,
        }
        verdict_path = out / VERDICT_NAME
        verdict_path.write_text(json.dumps(record, indent=2, sort_keys=True) + '\n')
        self.produce(stimulus, latches, verdict_path)

        if not verdict.passed:
            self.stdout.write(self.style.ERROR(
                f"FAIL: {verdict.mismatches} mismatching words, "
                f"{verdict.saturation_events} saturating increments with {bits}-bit counters"
            ))
            raise VerificationError(
                f"counter bank disagrees with the accumulator ({verdict.mismatches} words)"
            )
        self.success(f"PASS: {neurons * (timesteps // interval)} words match over "
                     f"{plan.partitions} partition(s)")
