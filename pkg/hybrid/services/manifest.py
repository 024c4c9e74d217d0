"""
Run manifests: what a command was asked to do and what it produced.

Every command invocation writes one ``run.json`` holding the fully resolved
options, the seed, sha256 hashes of the artifacts and start/finish times.
Passing that file back through ``--from-manifest`` replays the run.
"""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Union

from hybrid.serializers import RunManifestSerializer

from .exceptions import FormatError

logger = logging.getLogger(__name__)

RUN_MANIFEST_NAME = 'run.json'
_CHUNK = 1 << 20


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        for chunk in iter(lambda: handle.read(_CHUNK), b''):
            digest.update(chunk)
    return digest.hexdigest()


def hash_artifacts(paths: Iterable[Union[str, Path]]) -> Dict[str, str]:
    """Hash files; directories contribute every file below them, sorted by path."""
    hashes: Dict[str, str] = {}
    for path in paths:
        path = Path(path)
        if path.is_dir():
            for member in sorted(p for p in path.rglob('*') if p.is_file()):
                if member.name != RUN_MANIFEST_NAME:
                    hashes[str(member)] = sha256_file(member)
        elif path.exists():
            hashes[str(path)] = sha256_file(path)
        else:
            logger.warning(f"Artifact {path} was not produced")
    return hashes


@dataclass
class RunManifest:
    command: str
    config: Dict
    seed: Optional[int]
    artifacts: Dict[str, str] = field(default_factory=dict)
    started_at: str = ''
    finished_at: str = ''
    exit_code: int = 0

    def to_dict(self) -> Dict:
        return asdict(self)


def write_manifest(path: Union[str, Path], manifest: RunManifest) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + '\n')
    logger.info(f"Wrote run manifest {path}")
    return path


def read_manifest(path: Union[str, Path]) -> RunManifest:
    """Load a manifest written by ``write_manifest``.

    Raises:
        FormatError: the file is not JSON or lacks manifest fields
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not a run manifest: {exc.msg}", offset=exc.pos)
    serializer = RunManifestSerializer(data=data)
    if not serializer.is_valid():
        raise FormatError(f"{path} is not a run manifest: {dict(serializer.errors)}")
    return RunManifest(
        command=data['command'],
        config=data['config'],
        seed=data['seed'],
        artifacts=data['artifacts'],
        started_at=data['started_at'],
        finished_at=data['finished_at'],
        exit_code=data['exit_code'],
    )


def verify_artifacts(manifest: RunManifest) -> Dict[str, bool]:
    """Recompute each recorded hash; missing files count as mismatches."""
    return {
        name: Path(name).exists() and sha256_file(name) == digest
        for name, digest in manifest.artifacts.items()
    }
