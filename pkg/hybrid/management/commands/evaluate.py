"""
Management command to score a checkpoint on a dataset directory.
"""
import json
from pathlib import Path

from django.conf import settings

from hybrid.management.base import HybridCommand
from hybrid.services.checkpoint import load_checkpoint
from hybrid.services.event_io import read_dataset, stratified_split
from hybrid.services.exceptions import DimensionError
from hybrid.services.trainer import evaluate, pair_classes

REPORT_NAME = 'eval.json'


class Command(HybridCommand):
    help = 'Evaluate a trained checkpoint: accuracy, loss, confusion and reversal-pair accuracy'
    command_name = 'evaluate'
    required_options = ('checkpoint',)

    def add_run_arguments(self, parser):
        parser.add_argument('--checkpoint', type=str, default=None, help='Weights file (.hsw)')
        parser.add_argument('--data', type=str, default=None, help='Dataset directory')
        parser.add_argument(
            '--held-out',
            action='store_true',
            default=None,
            help='Score only the test part of the split train used (same --seed/--test-fraction)'
        )
        parser.add_argument('--seed', type=int, default=None)
        parser.add_argument('--test-fraction', type=float, default=None)
        parser.add_argument('--batch-size', type=int, default=None)
        parser.add_argument('--relaxed', action='store_true', default=None)
        parser.add_argument('--out', type=str, default=None, help='Report directory')

    def default_options(self):
        return {
            'checkpoint': None,
            'data': str(Path(settings.DATASETS_DIR) / 'desk'),
            'held_out': False,
            'seed': 0,
            'test_fraction': settings.TRAIN_TEST_FRACTION,
            'batch_size': settings.TRAIN_BATCH_SIZE,
            'relaxed': False,
            'out': str(Path(settings.RUNS_DIR) / 'evaluate'),
        }

    def run(self, config):
        model = load_checkpoint(config['checkpoint']).restore()
        data = read_dataset(config['data'])
        if tuple(data.shape) != tuple(model.spec.input_shape):
            raise DimensionError("dataset does not match the checkpoint input", data.shape,
                                 model.spec.input_shape)
        if config['held_out']:
            _, data = stratified_split(data, config['test_fraction'], seed=config['seed'])

        report = evaluate(model, data, config['batch_size'], relaxed=config['relaxed'])
        record = report.to_dict()
        record['samples'] = len(data)
        record['pair_accuracy'] = {f"{a}-{b}": report.pair_accuracy(a, b)
                                   for a, b in pair_classes(model.spec.class_count)}

        out = Path(config['out'])
        out.mkdir(parents=True, exist_ok=True)
        path = out / REPORT_NAME
        path.write_text(json.dumps(record, indent=2, sort_keys=True) + '\n')
        self.produce(path)

        for pair, accuracy in record['pair_accuracy'].items():
            self.stdout.write(f"  pair {pair}: {accuracy:.4f}")
        self.success(f"Accuracy {report.accuracy:.4f} on {len(data)} samples ({path})")
