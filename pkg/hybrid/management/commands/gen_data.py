"""
Management command to write a gesture dataset directory (EVS1 files + manifest).
"""
from pathlib import Path

from django.conf import settings

from hybrid.management.base import HybridCommand
from hybrid.services.dvs_gesture import load_split
from hybrid.services.event_io import MANIFEST_NAME, synth_gestures, write_dataset


class Command(HybridCommand):
    help = 'Generate the synthetic direction-reversal gesture set or convert DvsGesture recordings'
    command_name = 'gen_data'

    def add_run_arguments(self, parser):
        parser.add_argument(
            '--classes',
            type=int,
            default=None,
            help='Number of gesture classes (pairs of reversed sweeps). Default: 3'
        )
        parser.add_argument(
            '--count',
            type=int,
            default=None,
            help='Samples per class. Default: 20'
        )
        parser.add_argument(
            '--shape',
            type=int,
            nargs=4,
            default=None,
            metavar=('C', 'H', 'W', 'T'),
            help='Sample shape. Default: DESK_INPUT_SHAPE'
        )
        parser.add_argument('--seed', type=int, default=None, help='Generator seed. Default: 0')
        parser.add_argument(
            '--bin-ms',
            type=int,
            default=None,
            help='Frame width in milliseconds used for the event files'
        )
        parser.add_argument(
            '--dvs-root',
            type=str,
            default=None,
            help='Convert a DvsGesture release found here instead of generating data'
        )
        parser.add_argument(
            '--split',
            type=str,
            default=None,
            choices=['train', 'test'],
            help='DvsGesture split to convert. Default: train'
        )
        parser.add_argument('--out', type=str, default=None, help='Dataset directory')

    def default_options(self):
        return {
            'classes': settings.DEFAULT_CLASS_COUNT,
            'count': 20,
            'shape': list(settings.DESK_INPUT_SHAPE),
            'seed': 0,
            'bin_ms': settings.EVENT_BIN_MS,
            'dvs_root': None,
            'split': 'train',
            'out': str(Path(settings.DATASETS_DIR) / 'desk'),
        }

    def run(self, config):
        if config['count'] < 0:
            raise self.usage_error(f"--count must be >= 0, got {config['count']}")
        out = Path(config['out'])

        if config['dvs_root']:
            self.stdout.write(f"Converting DvsGesture {config['split']} split "
                              f"from {config['dvs_root']}")
            samples = load_split(config['dvs_root'], config['split'], bin_ms=config['bin_ms'],
                                 frames_per_sample=config['shape'][-1])
        else:
            self.stdout.write(
                f"Generating {config['count']} samples for each of {config['classes']} classes"
            )
            samples = synth_gestures(config['classes'], config['count'], config['shape'],
                                     seed=config['seed'])

        write_dataset(out, samples, bin_ms=config['bin_ms'])
        self.produce(out)
        self.success(f"Wrote {len(samples)} samples to {out / MANIFEST_NAME}")
