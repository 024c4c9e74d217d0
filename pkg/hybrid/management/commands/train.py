"""
Management command to train one model of the hybrid family on a dataset directory.
"""
import json
from pathlib import Path

from django.conf import settings
from django.core.management.base import CommandError

from hybrid.management.base import EXIT_NUMERIC, HybridCommand
from hybrid.serializers import ModelSpecSerializer, TrainConfigSerializer
from hybrid.services.checkpoint import save_checkpoint
from hybrid.services.event_io import read_dataset, stratified_split
from hybrid.services.exceptions import DimensionError, DivergenceError, FormatError
from hybrid.services.model_factory import MODEL_NAMES, build
from hybrid.services.trainer import OPTIMIZERS, pair_classes, train

CHECKPOINT_NAME = 'model.hsw'
LAST_FINITE_NAME = 'last_finite.hsw'
METRICS_NAME = 'metrics.jsonl'
EVAL_NAME = 'eval.json'
DEFAULT_INTERVAL = 5
SPEC_FIELDS = ('input_shape', 'channel_schedule', 'dense_schedule', 'classes', 'pad_final_group')


class Command(HybridCommand):
    help = 'Train a hybrid model (ann, s1a4 ... s5a0, snn) and write its checkpoint and metrics'
    command_name = 'train'
    required_options = ('model',)

    def add_run_arguments(self, parser):
        parser.add_argument(
            '--spec',
            type=str,
            default=None,
            help='Model spec JSON (model, interval, input_shape, channel_schedule, classes); '
                 '--model and --interval override its values'
        )
        parser.add_argument('--model', type=str, default=None, choices=MODEL_NAMES,
                            help='Architecture to train')
        parser.add_argument(
            '--interval',
            type=int,
            default=None,
            help='Accumulate interval I; must divide the sample timesteps. Default: 5'
        )
        parser.add_argument('--data', type=str, default=None, help='Dataset directory')
        parser.add_argument('--epochs', type=int, default=None)
        parser.add_argument('--batch-size', type=int, default=None)
        parser.add_argument('--learning-rate', type=float, default=None)
        parser.add_argument('--optimizer', type=str, default=None, choices=OPTIMIZERS)
        parser.add_argument('--seed', type=int, default=None,
                            help='Seeds initialization, shuffling and the train/test split')
        parser.add_argument(
            '--threads',
            type=int,
            default=None,
            help='Data-parallel shards per step. Default: HYBRID_NUM_THREADS'
        )
        parser.add_argument('--test-fraction', type=float, default=None)
        parser.add_argument(
            '--relaxed',
            action='store_true',
            default=None,
            help='Train with the smooth surrogate spike instead of the Heaviside step'
        )
        parser.add_argument('--out', type=str, default=None, help='Run directory')

    def default_options(self):
        return {
            'spec': None,
            'model': None,
            'interval': None,
            **{name: None for name in SPEC_FIELDS},
            'data': str(Path(settings.DATASETS_DIR) / 'desk'),
            'epochs': settings.TRAIN_EPOCHS,
            'batch_size': settings.TRAIN_BATCH_SIZE,
            'learning_rate': settings.TRAIN_LEARNING_RATE,
            'optimizer': 'adam',
            'seed': 0,
            'threads': settings.HYBRID_NUM_THREADS,
            'test_fraction': settings.TRAIN_TEST_FRACTION,
            'relaxed': False,
            'out': str(Path(settings.RUNS_DIR) / 'train'),
        }

    def file_options(self, options):
        path = options.get('spec')
        if not path:
            return {}
        try:
            values = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path} is not valid JSON: {exc.msg}", offset=exc.pos) from exc
        if not isinstance(values, dict):
            raise FormatError(f"{path} must hold a JSON object", offset=0)
        serializer = ModelSpecSerializer(data=values)
        if not serializer.is_valid():
            raise self.usage_error(f"invalid model spec {path}: {serializer.errors}")
        return dict(serializer.validated_data)

    def run(self, config):
        data = read_dataset(config['data'])
        if config['model'] == 'snn' and config['interval'] is not None:
            self.warn(f"Interval {config['interval']} ignored: the SNN baseline has no accumulator")
            config['interval'] = None
        elif config['model'] != 'snn' and config['interval'] is None:
            config['interval'] = DEFAULT_INTERVAL

        spec_data = {
            'model': config['model'],
            'interval': config['interval'],
            'input_shape': config['input_shape'] or list(data.shape),
            'classes': config['classes'] or max(data.class_count, 2),
        }
        for name in ('channel_schedule', 'dense_schedule', 'pad_final_group'):
            if config[name] is not None:
                spec_data[name] = config[name]
        if tuple(spec_data['input_shape']) != tuple(data.shape):
            raise DimensionError("dataset does not match the model spec input", data.shape,
                                 spec_data['input_shape'])
        spec_serializer = ModelSpecSerializer(data=spec_data)
        if not spec_serializer.is_valid():
            raise self.usage_error(f"invalid model configuration: {spec_serializer.errors}")
        train_serializer = TrainConfigSerializer(data={
            'epochs': config['epochs'],
            'batch_size': config['batch_size'],
            'learning_rate': config['learning_rate'],
            'optimizer': config['optimizer'],
            'seed': config['seed'],
            'num_threads': config['threads'],
            'relaxed': config['relaxed'],
        })
        if not train_serializer.is_valid():
            raise self.usage_error(f"invalid training configuration: {train_serializer.errors}")
        spec = spec_serializer.to_spec()
        cfg = train_serializer.to_config()

        train_set, test_set = stratified_split(data, config['test_fraction'], seed=config['seed'])
        self.stdout.write(f"Training {spec.model} on {len(train_set)} samples, "
                          f"testing on {len(test_set)}")

        out = Path(config['out'])
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / METRICS_NAME
        metrics_path.unlink(missing_ok=True)
        model = build(spec, seed=config['seed'])
        run_meta = {'train_config': cfg.to_dict()}

        try:
            result = train(model, train_set, cfg,
                           eval_data=test_set if len(test_set) else None,
                           metrics_path=metrics_path)
        except DivergenceError as exc:
            path = save_checkpoint(out / LAST_FINITE_NAME, model,
                                   metadata={**run_meta, 'diverged_epoch': exc.epoch,
                                             'diverged_step': exc.step})
            self.produce(path, metrics_path)
            self.stdout.write(self.style.ERROR(
                f"Training diverged at epoch {exc.epoch}, step {exc.step}; "
                f"last finite weights saved to {path}"
            ))
            raise CommandError(str(exc), returncode=EXIT_NUMERIC) from exc

        checkpoint = save_checkpoint(out / CHECKPOINT_NAME, model, result.optimizer.state_dict(),
                                     result.optimizer.step_count, metadata=run_meta)
        report = result.report.to_dict()
        report['pair_accuracy'] = {f"{a}-{b}": result.report.pair_accuracy(a, b)
                                   for a, b in pair_classes(spec.class_count)}
        eval_path = out / EVAL_NAME
        eval_path.write_text(json.dumps(report, indent=2, sort_keys=True) + '\n')
        self.produce(checkpoint, metrics_path, eval_path)
        self.success(f"Test accuracy {result.report.accuracy:.4f}; checkpoint {checkpoint}")
