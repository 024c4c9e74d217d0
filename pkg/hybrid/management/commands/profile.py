"""
Management command to estimate deployment latency, power and energy.
"""
import json
from pathlib import Path

from django.conf import settings
from django.core.management.base import CommandError

from hybrid.management.base import EXIT_IO, HybridCommand
from hybrid.serializers import CostRecordSerializer, ProfileSetSerializer
from hybrid.services.checkpoint import load_checkpoint
from hybrid.services.cost_model import check_orderings, emit_report, estimate, read_report, sweep
from hybrid.services.exceptions import ConfigurationError, FormatError, VerificationError
from hybrid.services.model_factory import MODEL_NAMES

ORDERINGS_NAME = 'orderings.json'
FORMATS = ('text', 'jsonl')


class Command(HybridCommand):
    help = 'Write cost reports for a checkpoint or a sweep of models × intervals'
    command_name = 'profile'

    def add_run_arguments(self, parser):
        parser.add_argument('--checkpoint', type=str, default=None,
                            help='Profile this trained model instead of sweeping')
        parser.add_argument('--profiles', type=str, default=None,
                            help='Device profile JSON. Default: the shipped calibration')
        parser.add_argument('--models', type=str, nargs='+', default=None, choices=MODEL_NAMES)
        parser.add_argument('--intervals', type=int, nargs='+', default=None)
        parser.add_argument('--shape', type=int, nargs=4, default=None,
                            metavar=('C', 'H', 'W', 'T'),
                            help='Sweep input shape. Default: SWEEP_INPUT_SHAPE')
        parser.add_argument('--classes', type=int, default=None)
        parser.add_argument('--seed', type=int, default=None)
        parser.add_argument('--formats', type=str, nargs='+', default=None, choices=FORMATS)
        parser.add_argument(
            '--strict',
            action='store_true',
            default=None,
            help='Exit with a verification failure when an ordering check fails'
        )
        parser.add_argument('--out', type=str, default=None, help='Report directory')

    def default_options(self):
        return {
            'checkpoint': None,
            'profiles': str(settings.DEFAULT_PROFILE_PATH),
            'models': list(MODEL_NAMES),
            'intervals': list(settings.SWEEP_INTERVALS),
            'shape': list(settings.SWEEP_INPUT_SHAPE),
            'classes': settings.DEFAULT_CLASS_COUNT,
            'seed': 0,
            'formats': list(FORMATS),
            'strict': False,
            'out': str(Path(settings.REPORTS_DIR) / 'profile'),
        }

    def load_profiles(self, path: str):
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path} is not JSON: {exc.msg}", offset=exc.pos)
        try:
            return ProfileSetSerializer.load(data)
        except ConfigurationError as exc:
            raise CommandError(f"{path}: {exc}", returncode=EXIT_IO) from exc

    def run(self, config):
        profiles = self.load_profiles(config['profiles'])
        if config['checkpoint']:
            reports = [estimate(load_checkpoint(config['checkpoint']).restore(), profiles)]
        else:
            reports = sweep(config['models'], config['intervals'], profiles,
                            input_shape=config['shape'], class_count=config['classes'],
                            seed=config['seed'])

        out = Path(config['out'])
        for report in reports:
            paths = emit_report(report, out / report.key, config['formats'])
            self.produce(*paths)
            for path in paths:
                if path.suffix == '.jsonl':
                    self.verify_report(path)
            self.stdout.write(
                f"{report.key:<12} energy {report.energy:.6e} J  latency {report.latency:.6e} s  "
                f"power {report.power:.6e} W  cores {report.allocation.total}"
            )

        reference = 5 if 5 in config['intervals'] else config['intervals'][0]
        checks = check_orderings(reports, interval=reference)
        orderings = out / ORDERINGS_NAME
        orderings.parent.mkdir(parents=True, exist_ok=True)
        orderings.write_text(json.dumps(
            [{'name': c.name, 'passed': c.passed, 'detail': c.detail} for c in checks],
            indent=2,
        ) + '\n')
        self.produce(orderings)

        for check in checks:
            style = self.style.SUCCESS if check.passed else self.style.ERROR
            self.stdout.write(style(f"{'PASS' if check.passed else 'FAIL'} {check.name}: "
                                    f"{check.detail}"))
        failed = [c.name for c in checks if not c.passed]
        if failed and config['strict']:
            raise VerificationError(f"ordering checks failed: {', '.join(failed)}")
        if failed:
            self.warn(f"{len(failed)} ordering check(s) failed")
        self.success(f"Wrote {len(reports)} report(s) to {out}")

    def verify_report(self, path: Path) -> None:
        """Re-read an emitted report and check energy = power × latency on every row."""
        read_report(path)
        for line in path.read_text().splitlines():
            record = json.loads(line)
            if record['record'] not in ('component', 'total'):
                continue
            serializer = CostRecordSerializer(data=record)
            if not serializer.is_valid():
                raise VerificationError(f"{path}: {serializer.errors}")
