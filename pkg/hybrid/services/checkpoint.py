"""
Flat binary weight container.

Layout (little-endian)::

    b"HSW1" | u64 manifest length | manifest JSON (UTF-8) | float64 payload

The manifest lists every array as ``{"name", "shape", "offset"}`` (offset in
bytes from the start of the payload) next to a free-form ``metadata`` object.
Keys are sorted and no timestamps are stored, so the same weights always give
the same bytes.
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from .exceptions import FormatError
from .model_factory import BuiltModel, HybridModelSpec, build

logger = logging.getLogger(__name__)

MAGIC = b'HSW1'
_LENGTH = struct.Struct('<Q')
_PAYLOAD_DTYPE = np.dtype('<f8')
OPTIMIZER_PREFIX = 'optim/'


def write_weights(path: Union[str, Path], arrays: Dict[str, np.ndarray],
                  metadata: Optional[Dict] = None) -> Path:
    path = Path(path)
    entries = []
    chunks = []
    offset = 0
    for name in arrays:
        array = np.ascontiguousarray(arrays[name], dtype=_PAYLOAD_DTYPE)
        entries.append({'name': name, 'shape': list(array.shape), 'offset': offset})
        chunks.append(array.tobytes())
        offset += array.nbytes
    manifest = json.dumps({'entries': entries, 'metadata': metadata or {}},
                          sort_keys=True, separators=(',', ':')).encode('utf-8')
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as handle:
        handle.write(MAGIC)
        handle.write(_LENGTH.pack(len(manifest)))
        handle.write(manifest)
        for chunk in chunks:
            handle.write(chunk)
    logger.info(f"Wrote {len(entries)} arrays ({offset} payload bytes) to {path}")
    return path


def read_weights(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path} is not a weight container (bad magic)", offset=0)
    if len(raw) < 4 + _LENGTH.size:
        raise FormatError(f"{path} is truncated inside the header", offset=len(raw))
    (length,) = _LENGTH.unpack_from(raw, 4)
    start = 4 + _LENGTH.size
    if start + length > len(raw):
        raise FormatError(f"{path} is truncated inside the manifest", offset=len(raw))
    try:
        manifest = json.loads(raw[start:start + length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path} has an unreadable manifest: {exc}", offset=start) from exc

    payload_start = start + length
    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest.get('entries', []):
        shape = tuple(entry['shape'])
        count = int(np.prod(shape, dtype=np.int64))
        begin = payload_start + int(entry['offset'])
        end = begin + count * _PAYLOAD_DTYPE.itemsize
        if end > len(raw):
            raise FormatError(f"array {entry['name']} runs past the end of {path}", offset=begin)
        arrays[entry['name']] = np.frombuffer(raw, dtype=_PAYLOAD_DTYPE, count=count,
                                              offset=begin).reshape(shape).astype(np.float64)
    return arrays, manifest.get('metadata', {})


@dataclass
class Checkpoint:
    """Model spec, weights, optimizer state and run metadata."""

    spec: HybridModelSpec
    weights: Dict[str, np.ndarray]
    optimizer: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    optimizer_step: int = 0
    metadata: Dict = field(default_factory=dict)

    def restore(self) -> BuiltModel:
        model = build(self.spec)
        model.load_state_dict(self.weights)
        return model


def save_checkpoint(path: Union[str, Path], model: BuiltModel,
                    optimizer_state: Optional[Dict[str, Dict[str, np.ndarray]]] = None,
                    optimizer_step: int = 0, metadata: Optional[Dict] = None) -> Path:
    arrays = model.state_dict()
    for slot, values in (optimizer_state or {}).items():
        for name, value in values.items():
            arrays[f"{OPTIMIZER_PREFIX}{slot}/{name}"] = value
    meta = dict(metadata or {})
    meta['model_spec'] = model.spec.to_dict()
    meta['optimizer_step'] = optimizer_step
    return write_weights(path, arrays, meta)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    arrays, metadata = read_weights(path)
    if 'model_spec' not in metadata:
        raise FormatError(f"{path} carries no model spec")
    weights: Dict[str, np.ndarray] = {}
    optimizer: Dict[str, Dict[str, np.ndarray]] = {}
    for name, value in arrays.items():
        if name.startswith(OPTIMIZER_PREFIX):
            slot, param = name[len(OPTIMIZER_PREFIX):].split('/', 1)
            optimizer.setdefault(slot, {})[param] = value
        else:
            weights[name] = value
    return Checkpoint(
        spec=HybridModelSpec.from_dict(metadata['model_spec']),
        weights=weights,
        optimizer=optimizer,
        optimizer_step=int(metadata.get('optimizer_step', 0)),
        metadata=metadata,
    )
