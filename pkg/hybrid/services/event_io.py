"""
Event-stream ingestion, temporal binning and the synthetic gesture generator.

Native event files (EVS1, little-endian)::

    b"EVS1" | u16 width | u16 height | u64 count | count × (u32 t_us, u16 x, u16 y, u8 p)

Binned frames are indexed ``frames[polarity, y, x, t]`` with off → 0, on → 1
and saturate at 1 when several events share a pixel and bin.
"""
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from django.conf import settings

from .exceptions import ConfigurationError, ContractError, FormatError

logger = logging.getLogger(__name__)

MAGIC = b'EVS1'
HEADER = struct.Struct('<4sHHQ')
EVENT_DTYPE = np.dtype([('t', '<u4'), ('x', '<u2'), ('y', '<u2'), ('p', 'u1')])
MANIFEST_NAME = 'manifest.txt'


@dataclass
class EventStream:
    events: np.ndarray
    width: int
    height: int

    def __len__(self) -> int:
        return len(self.events)


@dataclass
class Sample:
    frames: np.ndarray
    label: Optional[int] = None
    group: Optional[int] = None


@dataclass
class BinningResult:
    samples: List[Sample]
    rejected: int = 0


@dataclass
class SampleSet:
    """Stacked samples: frames (n, 2, H, W, T) uint8, labels and twin groups."""

    frames: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    class_count: int = 0
    meta: Dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.frames.shape[1:])

    def subset(self, indices: Sequence[int]) -> 'SampleSet':
        indices = np.asarray(indices, dtype=np.int64)
        return SampleSet(self.frames[indices], self.labels[indices], self.groups[indices],
                         self.class_count, dict(self.meta))

    @classmethod
    def empty(cls, shape: Sequence[int], class_count: int = 0) -> 'SampleSet':
        return cls(np.zeros((0,) + tuple(shape), dtype=np.uint8), np.zeros(0, dtype=np.int64),
                   np.zeros(0, dtype=np.int64), class_count)


def make_events(t, x, y, p) -> np.ndarray:
    events = np.zeros(len(t), dtype=EVENT_DTYPE)
    events['t'], events['x'], events['y'], events['p'] = t, x, y, p
    return events


# ========== EVS1 files ==========

def write_events(path: Union[str, Path], events: np.ndarray, width: int, height: int) -> Path:
    path = Path(path)
    events = np.asarray(events, dtype=EVENT_DTYPE)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as handle:
        handle.write(HEADER.pack(MAGIC, width, height, len(events)))
        handle.write(events.tobytes())
    return path


def load_events(path: Union[str, Path], sort_tolerance_us: Optional[int] = None) -> EventStream:
    """Read an EVS1 file; small timestamp inversions are repaired by a stable sort.

    Raises:
        FormatError: bad magic, truncation, or inversions beyond the tolerance
    """
    tolerance = settings.EVENT_SORT_TOLERANCE_US if sort_tolerance_us is None else sort_tolerance_us
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise FormatError(f"{path} is shorter than the EVS1 header", offset=len(raw))
    magic, width, height, count = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path} has magic {magic!r}, expected {MAGIC!r}", offset=0)
    expected = HEADER.size + count * EVENT_DTYPE.itemsize
    if len(raw) < expected:
        complete = (len(raw) - HEADER.size) // EVENT_DTYPE.itemsize
        raise FormatError(f"{path} declares {count} events but holds {complete}",
                          offset=HEADER.size + complete * EVENT_DTYPE.itemsize)
    if len(raw) > expected:
        raise FormatError(f"{path} has trailing bytes after {count} events", offset=expected)

    events = np.frombuffer(raw, dtype=EVENT_DTYPE, count=count, offset=HEADER.size).copy()
    if count > 1:
        times = events['t'].astype(np.int64)
        running_max = np.maximum.accumulate(times)
        lag = running_max - times
        if lag.max() > tolerance:
            index = int(np.argmax(lag > tolerance))
            raise FormatError(
                f"{path} is unsorted: event {index} is {int(lag[index])} us "
                "behind its predecessors",
                offset=HEADER.size + index * EVENT_DTYPE.itemsize,
            )
        if lag.any():
            events = events[np.argsort(times, kind='stable')]
    return EventStream(events, width, height)


# ========== binning ==========

def bin_events(events: np.ndarray, width: int, height: int, bin_ms: Optional[int] = None,
               frames_per_sample: Optional[int] = None, duration_us: Optional[int] = None,
               t_origin: int = 0, label: Optional[int] = None) -> BinningResult:
    """Compile events into binary frames and cut them into samples of T frames.

    Args:
        events: sorted EVENT_DTYPE array
        width, height: sensor size
        bin_ms: frame length in milliseconds
        frames_per_sample: T, frames per sample window
        duration_us: recording length; defaults to the span of the events
        t_origin: timestamp of the first frame
        label: class assigned to every produced sample

    Returns:
        Samples for the ⌊frames/T⌋ complete windows plus the rejected-event count
    """
    bin_ms = bin_ms or settings.EVENT_BIN_MS
    frames_per_sample = frames_per_sample or settings.FRAMES_PER_SAMPLE
    if bin_ms < 1 or frames_per_sample < 1:
        raise ConfigurationError("bin_ms and frames_per_sample must be positive")
    bin_us = bin_ms * 1000
    events = np.asarray(events, dtype=EVENT_DTYPE)

    t = events['t'].astype(np.int64) - t_origin
    valid = ((events['x'] < width) & (events['y'] < height) & (events['p'] <= 1) & (t >= 0))
    rejected = int((~valid).sum())
    if rejected:
        logger.warning(f"Rejected {rejected} events outside the {width}x{height} sensor "
                       "or with invalid polarity")

    if duration_us is None:
        total_frames = int(t[valid].max() // bin_us + 1) if valid.any() else 0
    else:
        total_frames = int(duration_us // bin_us)
    windows = total_frames // frames_per_sample
    if windows == 0:
        return BinningResult([], rejected)

    frame_index = t // bin_us
    kept = valid & (frame_index < windows * frames_per_sample)
    dropped = int((valid & ~kept).sum())
    if dropped:
        logger.debug(f"{dropped} events fall into the trailing partial window")

    frames = np.zeros((2, height, width, windows * frames_per_sample), dtype=np.uint8)
    frames[events['p'][kept], events['y'][kept], events['x'][kept], frame_index[kept]] = 1
    samples = [
        Sample(np.ascontiguousarray(frames[..., w * frames_per_sample:(w + 1) * frames_per_sample]),
               label)
        for w in range(windows)
    ]
    return BinningResult(samples, rejected)


def frames_to_events(frames: np.ndarray, bin_us: int) -> np.ndarray:
    """Events reproducing binary frames (2, H, W, T); one event per set pixel at t·bin_us."""
    t, p, y, x = np.nonzero(np.transpose(frames, (3, 0, 1, 2)))
    return make_events(t * bin_us, x, y, p)


# ========== synthetic gestures ==========

def _sweep_positions(rng: np.random.Generator, extent: int, timesteps: int,
                     bar_width: int) -> np.ndarray:
    speed = rng.uniform(0.6, 1.2) * (extent + bar_width) / timesteps
    start = rng.uniform(-bar_width, extent / 4.0)
    return np.floor(start + speed * np.arange(timesteps)).astype(np.int64)


def _render_bar(rng: np.random.Generator, direction: int, height: int, width: int,
                timesteps: int, palindrome: bool = False, noise: float = 0.002) -> np.ndarray:
    """Frames of a bar sweeping in one of three directions with edge-polarity events."""
    yy, xx = np.mgrid[0:height, 0:width]
    coordinate, extent = [(xx, width), (yy, height), (xx + yy, height + width - 1)][direction % 3]
    bar_width = int(rng.integers(2, 5))

    if palindrome:
        half = (timesteps + 1) // 2
        out = _sweep_positions(rng, extent, half, bar_width)
        positions = np.concatenate([out, out[:timesteps - half][::-1]])
    else:
        positions = _sweep_positions(rng, extent, timesteps, bar_width)

    across = yy if direction % 3 == 0 else xx
    across_extent = height if direction % 3 == 0 else width
    length = int(rng.integers(max(across_extent // 2, 1), across_extent + 1))
    offset = int(rng.integers(0, across_extent - length + 1))
    band = (across >= offset) & (across < offset + length)
    if direction % 3 == 2:
        band = np.ones_like(band)

    occupied = ((coordinate[None] >= positions[:, None, None])
                & (coordinate[None] < positions[:, None, None] + bar_width)
                & band[None])
    previous = np.concatenate([np.zeros_like(occupied[:1]), occupied[:-1]])
    frames = np.zeros((2, height, width, timesteps), dtype=np.uint8)
    frames[1] = np.transpose(occupied & ~previous, (1, 2, 0))
    frames[0] = np.transpose(previous & ~occupied, (1, 2, 0))
    frames |= (rng.random(frames.shape) < noise).astype(np.uint8)
    return frames


def synth_gestures(class_count: int, samples_per_class: int,
                   shape: Optional[Sequence[int]] = None, seed: int = 0) -> SampleSet:
    """Deterministic desk-scale gesture set separable only through temporal order.

    Classes 2j and 2j+1 form a direction-reversal pair: every sample of class
    2j+1 is the exact time reversal of its twin in class 2j, so both have the
    same per-pixel spike totals. With an odd class count the last class is an
    out-and-back sweep. Twins share a group id so splits keep them together.
    """
    if class_count < 2:
        raise ContractError(f"synth_gestures needs at least 2 classes, got {class_count}")
    shape = tuple(shape or settings.DESK_INPUT_SHAPE)
    channels, height, width, timesteps = shape
    if channels != 2:
        raise ConfigurationError(f"gesture samples have 2 polarity channels, got shape {shape}")

    rng = np.random.default_rng(seed)
    per_class: List[List[Tuple[np.ndarray, int]]] = [[] for _ in range(class_count)]
    group = 0
    for _ in range(samples_per_class):
        for pair in range(class_count // 2):
            frames = _render_bar(rng, pair, height, width, timesteps)
            per_class[2 * pair].append((frames, group))
            per_class[2 * pair + 1].append((np.ascontiguousarray(frames[..., ::-1]), group))
            group += 1
        if class_count % 2:
            frames = _render_bar(rng, class_count // 2, height, width, timesteps, palindrome=True)
            per_class[-1].append((frames, group))
            group += 1

    if samples_per_class == 0:
        return SampleSet.empty(shape, class_count)
    frames = np.stack([f for items in per_class for f, _ in items])
    labels = np.repeat(np.arange(class_count, dtype=np.int64), samples_per_class)
    groups = np.array([g for items in per_class for _, g in items], dtype=np.int64)
    logger.info(f"Generated {len(labels)} synthetic gesture samples of shape {shape}")
    return SampleSet(frames, labels, groups, class_count, {'seed': seed})


def stratified_split(samples: SampleSet, test_fraction: Optional[float] = None,
                     seed: int = 0) -> Tuple[SampleSet, SampleSet]:
    """Seeded split that keeps twin groups whole and stratifies by group class set."""
    fraction = settings.TRAIN_TEST_FRACTION if test_fraction is None else test_fraction
    if not 0.0 <= fraction < 1.0:
        raise ConfigurationError(f"test_fraction must lie in [0, 1), got {fraction}")
    rng = np.random.default_rng(seed)

    members: Dict[int, List[int]] = {}
    for index, group in enumerate(samples.groups.tolist()):
        members.setdefault(group, []).append(index)
    strata: Dict[Tuple[int, ...], List[int]] = {}
    for group, indices in members.items():
        key = tuple(sorted(set(samples.labels[indices].tolist())))
        strata.setdefault(key, []).append(group)

    test_groups = set()
    for key in sorted(strata):
        groups = np.array(sorted(strata[key]))
        rng.shuffle(groups)
        test_groups.update(groups[:int(round(len(groups) * fraction))].tolist())

    test = [i for i, g in enumerate(samples.groups.tolist()) if g in test_groups]
    train = [i for i, g in enumerate(samples.groups.tolist()) if g not in test_groups]
    return samples.subset(train), samples.subset(test)


# ========== dataset directories ==========

def write_dataset(directory: Union[str, Path], samples: SampleSet,
                  bin_ms: Optional[int] = None) -> Path:
    """One EVS1 file per sample plus ``manifest.txt`` (file, window, label, group)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    bin_ms = bin_ms or settings.EVENT_BIN_MS
    _, height, width, _ = samples.shape
    lines = [
        f"# shape {' '.join(str(d) for d in samples.shape)}",
        f"# bin_ms {bin_ms}",
        f"# classes {samples.class_count}",
    ]
    for index in range(len(samples)):
        name = f"sample_{index:05d}.evs"
        write_events(directory / name, frames_to_events(samples.frames[index], bin_ms * 1000),
                     width, height)
        lines.append(f"{name} 0 {int(samples.labels[index])} {int(samples.groups[index])}")
    manifest = directory / MANIFEST_NAME
    manifest.write_text('\n'.join(lines) + '\n')
    logger.info(f"Wrote {len(samples)} samples to {directory}")
    return manifest


def read_dataset(directory: Union[str, Path]) -> SampleSet:
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {directory}")

    header: Dict[str, List[str]] = {}
    rows: List[List[str]] = []
    for line in manifest.read_text().splitlines():
        if line.startswith('#'):
            key, *values = line[1:].split()
            header[key] = values
        elif line.strip():
            rows.append(line.split())
    missing = [key for key in ('shape', 'bin_ms') if key not in header]
    if missing:
        raise ConfigurationError(f"{manifest} lacks header fields", missing_fields=missing)

    shape = tuple(int(v) for v in header['shape'])
    bin_ms = int(header['bin_ms'][0])
    class_count = int(header.get('classes', ['0'])[0])
    _, height, width, timesteps = shape
    if not rows:
        return SampleSet.empty(shape, class_count)

    frames, labels, groups = [], [], []
    for name, window, label, *rest in rows:
        stream = load_events(directory / name)
        binned = bin_events(stream.events, width, height, bin_ms=bin_ms,
                            frames_per_sample=timesteps,
                            duration_us=(int(window) + 1) * timesteps * bin_ms * 1000)
        frames.append(binned.samples[int(window)].frames)
        labels.append(int(label))
        groups.append(int(rest[0]) if rest else len(groups))
    class_count = class_count or (max(labels) + 1)
    return SampleSet(np.stack(frames), np.array(labels, dtype=np.int64),
                     np.array(groups, dtype=np.int64), class_count, {'bin_ms': bin_ms})
