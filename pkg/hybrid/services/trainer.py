"""
Unified training of the spiking backbone, accumulator and non-spiking head.

Each optimizer step splits the mini-batch into shards that run on a thread
pool. Every shard builds a private graph and returns a gradient map; the maps
are summed in shard order, so results do not depend on thread scheduling.
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from django.conf import settings

from .autodiff import Graph, Tensor, mul, no_grad, softmax_cross_entropy
from .event_io import SampleSet
from .exceptions import ConfigurationError, DimensionError, DivergenceError
from .model_factory import BuiltModel
from .spiking import ForwardContext

logger = logging.getLogger(__name__)

OPTIMIZERS = ('adam', 'sgd')


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    optimizer: str = 'adam'
    seed: int = 0
    num_threads: int = 1
    relaxed: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.num_threads < 1:
            raise ConfigurationError(
                "epochs must be >= 0, batch_size and num_threads must be positive"
            )
        if self.learning_rate < 0 or self.clip_norm < 0 or self.eps <= 0:
            raise ConfigurationError("learning_rate and clip_norm must be >= 0, eps positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("Adam betas must lie in [0, 1)")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_settings(cls, **overrides) -> 'TrainConfig':
        values = {
            'epochs': settings.TRAIN_EPOCHS,
            'batch_size': settings.TRAIN_BATCH_SIZE,
            'learning_rate': settings.TRAIN_LEARNING_RATE,
            'beta1': settings.TRAIN_BETA1,
            'beta2': settings.TRAIN_BETA2,
            'eps': settings.TRAIN_EPSILON,
            'clip_norm': settings.TRAIN_CLIP_NORM,
            'num_threads': settings.HYBRID_NUM_THREADS,
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_dict(self) -> Dict:
        return asdict(self)


# ========== optimizers ==========

def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to a global L2 norm of at most ``max_norm``; returns the norm."""
    total = 0.0
    for name in grads:
        total += float(np.vdot(grads[name], grads[name]))
    norm = float(np.sqrt(total))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


class Adam:
    """Adam with bias correction and global gradient-norm clipping."""

    def __init__(self, params: Dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.step_count = 0
        self.m = {name: np.zeros(p.shape) for name, p in params.items()}
        self.v = {name: np.zeros(p.shape) for name, p in params.items()}

    def step(self, grads: Dict[str, np.ndarray]) -> float:
        norm = clip_gradients(grads, self.cfg.clip_norm)
        self.step_count += 1
        b1, b2, lr = self.cfg.beta1, self.cfg.beta2, self.cfg.learning_rate
        correction1 = 1.0 - b1 ** self.step_count
        correction2 = 1.0 - b2 ** self.step_count
        for name, param in self.params.items():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            if lr == 0:
                continue
            denom = np.sqrt(self.v[name] / correction2) + self.cfg.eps
            update = (self.m[name] / correction1) / denom
            param.assign(param.data - lr * update)
        return norm

    def state_dict(self) -> Dict[str, Dict[str, np.ndarray]]:
        return {'m': dict(self.m), 'v': dict(self.v)}

    def load_state_dict(self, state: Dict[str, Dict[str, np.ndarray]], step: int) -> None:
        self.m.update(state.get('m', {}))
        self.v.update(state.get('v', {}))
        self.step_count = step


class SGD:
    def __init__(self, params: Dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.step_count = 0

    def step(self, grads: Dict[str, np.ndarray]) -> float:
        norm = clip_gradients(grads, self.cfg.clip_norm)
        self.step_count += 1
        if self.cfg.learning_rate:
            for name, param in self.params.items():
                param.assign(param.data - self.cfg.learning_rate * grads[name])
        return norm

    def state_dict(self) -> Dict[str, Dict[str, np.ndarray]]:
        return {}

    def load_state_dict(self, state, step: int) -> None:
        self.step_count = step


def make_optimizer(params: Dict[str, Tensor], cfg: TrainConfig):
    return Adam(params, cfg) if cfg.optimizer == 'adam' else SGD(params, cfg)


# ========== reports ==========

@dataclass
class EvalReport:
    confusion: np.ndarray
    loss: float = 0.0
    loss_curve: List[float] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        total = int(self.confusion.sum())
        return float(np.trace(self.confusion)) / total if total else 0.0

    @property
    def class_count(self) -> int:
        return self.confusion.shape[0]

    def pair_accuracy(self, first: int, second: int) -> float:
        """Accuracy restricted to the samples of two classes."""
        return pair_accuracy(self.confusion, first, second)

    def to_dict(self) -> Dict:
        return {
            'accuracy': self.accuracy,
            'loss': self.loss,
            'confusion': self.confusion.astype(int).tolist(),
            'loss_curve': list(self.loss_curve),
        }


def pair_accuracy(confusion: np.ndarray, first: int, second: int) -> float:
    hits = confusion[first, first] + confusion[second, second]
    total = confusion[first].sum() + confusion[second].sum()
    return float(hits) / float(total) if total else 0.0


@dataclass
class TrainResult:
    model: BuiltModel
    report: EvalReport
    history: List[Dict]
    optimizer: object


# ========== training ==========

def _context(relaxed: bool) -> ForwardContext:
    return ForwardContext.from_settings(relaxed=relaxed)


def _shard_gradients(model: BuiltModel, frames: np.ndarray, labels: np.ndarray, scale: float,
                     relaxed: bool) -> Tuple[float, Dict[str, np.ndarray], np.ndarray]:
    params = model.parameters()
    logits = model.forward(Tensor(frames), _context(relaxed))
    loss = mul(softmax_cross_entropy(logits, labels, reduction='sum'), scale)
    value = float(loss.data)
    by_tensor = Graph.trace(loss).backward()
    grads = {name: by_tensor.get(p, np.zeros(p.shape)) for name, p in params.items()}
    return value, grads, logits.data.argmax(axis=1)


def batch_gradients(model: BuiltModel, frames: np.ndarray, labels: np.ndarray,
                    num_threads: int = 1, relaxed: bool = False,
                    executor: Optional[ThreadPoolExecutor] = None
                    ) -> Tuple[float, Dict[str, np.ndarray], np.ndarray]:
    """Mean cross-entropy of the batch, its gradient map and the predictions."""
    count = len(labels)
    if count == 0:
        raise DimensionError("cannot take a gradient step on an empty batch", frames.shape)
    shards = [s for s in np.array_split(np.arange(count), min(num_threads, count)) if len(s)]
    jobs = [(frames[s].astype(np.float64), labels[s]) for s in shards]
    scale = 1.0 / count
    if executor is None or len(jobs) == 1:
        results = [_shard_gradients(model, f, y, scale, relaxed) for f, y in jobs]
    else:
        futures = [executor.submit(_shard_gradients, model, f, y, scale, relaxed) for f, y in jobs]
        results = [future.result() for future in futures]

    loss = 0.0
    merged: Dict[str, np.ndarray] = {}
    predictions = []
    for value, grads, predicted in results:
        loss += value
        for name, grad in grads.items():
            merged[name] = merged[name] + grad if name in merged else grad
        predictions.append(predicted)
    return loss, merged, np.concatenate(predictions)


def _all_finite(loss: float, grads: Dict[str, np.ndarray]) -> bool:
    return bool(np.isfinite(loss)) and all(np.all(np.isfinite(g)) for g in grads.values())


def write_metrics(path: Union[str, Path], record: Dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'a') as handle:
        handle.write(json.dumps(record, sort_keys=True) + '\n')


def train(model: BuiltModel, data: SampleSet, cfg: TrainConfig,
          eval_data: Optional[SampleSet] = None,
          metrics_path: Optional[Union[str, Path]] = None) -> TrainResult:
    """Train ``model`` in place with one optimizer step per mini-batch.

    Raises:
        DivergenceError: a non-finite loss or gradient; carries the last finite weights
    """
    if tuple(data.shape) != tuple(model.spec.input_shape):
        raise DimensionError("training data does not match the model input", data.shape,
                             model.spec.input_shape)
    _check_labels(model, data)
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    optimizer = make_optimizer(params, cfg)
    history: List[Dict] = []
    last_finite = model.state_dict()

    logger.info(f"Training {model} on {len(data)} samples for {cfg.epochs} epochs")
    with ThreadPoolExecutor(max_workers=cfg.num_threads) as executor:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(data))
            epoch_loss, correct, seen = 0.0, 0, 0
            for step, start in enumerate(range(0, len(order), cfg.batch_size)):
                batch = order[start:start + cfg.batch_size]
                labels = data.labels[batch]
                loss, grads, predicted = batch_gradients(
                    model, data.frames[batch], labels, cfg.num_threads, cfg.relaxed, executor,
                )
                if not _all_finite(loss, grads):
                    logger.error(f"Loss diverged at epoch {epoch}, step {step}")
                    model.load_state_dict(last_finite)
                    raise DivergenceError("training loss is no longer finite",
                                          last_finite_state=last_finite, epoch=epoch, step=step)
                optimizer.step(grads)
                last_finite = model.state_dict()
                epoch_loss += loss * len(batch)
                correct += int((predicted == labels).sum())
                seen += len(batch)

            record = {
                'epoch': epoch,
                'loss': epoch_loss / seen if seen else 0.0,
                'accuracy': correct / seen if seen else 0.0,
            }
            history.append(record)
            logger.info(f"Epoch {epoch}: loss={record['loss']:.4f} "
                        f"accuracy={record['accuracy']:.3f}")
            if metrics_path:
                write_metrics(metrics_path, record)

    report = evaluate(model, eval_data if eval_data is not None else data, cfg.batch_size,
                      relaxed=cfg.relaxed)
    report.loss_curve = [record['loss'] for record in history]
    return TrainResult(model, report, history, optimizer)


def _check_labels(model: BuiltModel, data: SampleSet) -> None:
    if len(data) and int(data.labels.max()) >= model.spec.class_count:
        raise DimensionError(f"labels reach class {int(data.labels.max())} but the model has "
                             f"{model.spec.class_count} classes")


def predict(model: BuiltModel, frames: np.ndarray, batch_size: int = 32,
            relaxed: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Logits and argmax predictions (lowest index wins ties) without recording a graph."""
    logits = []
    with no_grad():
        for start in range(0, len(frames), batch_size):
            chunk = Tensor(frames[start:start + batch_size].astype(np.float64))
            logits.append(model.forward(chunk, _context(relaxed)).data)
    if not logits:
        return np.zeros((0, model.spec.class_count)), np.zeros(0, dtype=np.int64)
    stacked = np.concatenate(logits)
    return stacked, stacked.argmax(axis=1)


def evaluate(model: BuiltModel, data: SampleSet, batch_size: int = 32,
             relaxed: bool = False) -> EvalReport:
    classes = model.spec.class_count
    _check_labels(model, data)
    confusion = np.zeros((classes, classes), dtype=np.int64)
    logits, predicted = predict(model, data.frames, batch_size, relaxed)
    np.add.at(confusion, (data.labels, predicted), 1)
    loss = 0.0
    if len(data):
        loss = float(softmax_cross_entropy(Tensor(logits), data.labels).data)
    return EvalReport(confusion, loss)


def pair_classes(class_count: int) -> Sequence[Tuple[int, int]]:
    """Direction-reversal pairs of the synthetic gesture set."""
    return [(2 * j, 2 * j + 1) for j in range(class_count // 2)]
