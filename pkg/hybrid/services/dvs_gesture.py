"""
Optional adapter for the DvsGesture recordings (AEDAT 3.1 + label CSV).

Only polarity packets are decoded. Windows of ``frames_per_sample`` bins are
cut over the whole recording; a window takes the label of the gesture that
covers more than half of it and is dropped when no gesture does.
"""
import csv
import logging
import struct
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from django.conf import settings

from .event_io import SampleSet, bin_events, make_events
from .exceptions import FormatError

logger = logging.getLogger(__name__)

HEADER_END = b'#!END-HEADER\r\n'
PACKET_HEADER = struct.Struct('<hhiiiiii')
POLARITY_EVENT = 1
SENSOR_SIZE = 128

GestureInterval = Tuple[int, int, int]


def read_aedat(path: Union[str, Path]) -> np.ndarray:
    """Decode the polarity events of an AEDAT 3.1 file."""
    raw = Path(path).read_bytes()
    start = raw.find(HEADER_END)
    if start < 0:
        raise FormatError(f"{path} has no AEDAT end-of-header marker", offset=0)
    position = start + len(HEADER_END)
    chunks = []
    while position < len(raw):
        if position + PACKET_HEADER.size > len(raw):
            raise FormatError(f"{path} ends inside a packet header", offset=position)
        (event_type, _source, event_size, ts_offset, ts_overflow,
         _capacity, event_number, _valid) = PACKET_HEADER.unpack_from(raw, position)
        position += PACKET_HEADER.size
        length = event_size * event_number
        if position + length > len(raw):
            raise FormatError(f"{path} ends inside a packet payload", offset=position)
        if event_type == POLARITY_EVENT and event_number:
            words = np.frombuffer(raw, dtype='<u4', count=length // 4, offset=position)
            words = words.reshape(event_number, event_size // 4)
            data = words[:, 0].astype(np.int64)
            stamps = words[:, ts_offset // 4].astype(np.int64) | (int(ts_overflow) << 31)
            chunks.append(np.stack([stamps, (data >> 17) & 0x7FFF, (data >> 2) & 0x7FFF,
                                    (data >> 1) & 0x1], axis=1))
        position += length
    if not chunks:
        return make_events([], [], [], [])
    table = np.concatenate(chunks)
    table = table[np.argsort(table[:, 0], kind='stable')]
    return make_events(table[:, 0], table[:, 1], table[:, 2], table[:, 3])


def read_labels(path: Union[str, Path]) -> List[GestureInterval]:
    """(label, start_us, end_us) rows; the CSV uses 1-based class numbers."""
    intervals = []
    with open(path, newline='') as handle:
        for row in csv.DictReader(handle):
            intervals.append((int(row['class']) - 1, int(row['startTime_usec']),
                              int(row['endTime_usec'])))
    return intervals


def majority_label(window_start: int, window_us: int,
                   intervals: Sequence[GestureInterval]) -> Optional[int]:
    window_end = window_start + window_us
    for label, start, end in intervals:
        overlap = min(end, window_end) - max(start, window_start)
        if 2 * overlap > window_us:
            return label
    return None


def load_recording(aedat_path: Union[str, Path], labels_path: Union[str, Path],
                   bin_ms: Optional[int] = None,
                   frames_per_sample: Optional[int] = None) -> SampleSet:
    bin_ms = bin_ms or settings.EVENT_BIN_MS
    frames_per_sample = frames_per_sample or settings.FRAMES_PER_SAMPLE
    events = read_aedat(aedat_path)
    intervals = read_labels(labels_path)
    shape = (2, SENSOR_SIZE, SENSOR_SIZE, frames_per_sample)
    if len(events) == 0 or not intervals:
        return SampleSet.empty(shape, 11)

    origin = int(events['t'][0])
    binned = bin_events(events, SENSOR_SIZE, SENSOR_SIZE, bin_ms=bin_ms,
                        frames_per_sample=frames_per_sample, t_origin=origin)
    window_us = bin_ms * 1000 * frames_per_sample
    frames, labels = [], []
    for index, sample in enumerate(binned.samples):
        label = majority_label(origin + index * window_us, window_us, intervals)
        if label is not None:
            frames.append(sample.frames)
            labels.append(label)
    if not frames:
        return SampleSet.empty(shape, 11)
    labels = np.array(labels, dtype=np.int64)
    return SampleSet(np.stack(frames), labels, np.arange(len(labels), dtype=np.int64), 11)


def load_split(root: Union[str, Path], split: str = 'train', bin_ms: Optional[int] = None,
               frames_per_sample: Optional[int] = None) -> SampleSet:
    """Load every trial listed in ``trials_to_<split>.txt`` under ``root``."""
    root = Path(root)
    listing = root / f"trials_to_{split}.txt"
    trials = [line.strip() for line in listing.read_text().splitlines() if line.strip()]
    parts = []
    for trial in trials:
        aedat = root / trial
        parts.append(load_recording(aedat, aedat.with_name(f"{aedat.stem}_labels.csv"),
                                    bin_ms, frames_per_sample))
        logger.info(f"{trial}: {len(parts[-1])} samples")
    parts = [p for p in parts if len(p)]
    if not parts:
        return SampleSet.empty((2, SENSOR_SIZE, SENSOR_SIZE,
                                frames_per_sample or settings.FRAMES_PER_SAMPLE), 11)
    frames = np.concatenate([p.frames for p in parts])
    labels = np.concatenate([p.labels for p in parts])
    return SampleSet(frames, labels, np.arange(len(labels), dtype=np.int64), 11)
