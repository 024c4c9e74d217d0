"""
Shared plumbing of the hybrid management commands.

Subclasses declare their options through ``add_run_arguments`` (every option
defaults to None) and ``default_options``; ``handle`` merges defaults, an
optional run manifest, options read from files and the explicit flags, runs
the command, maps service errors onto exit codes and writes exactly one run
manifest.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from django.core.management.base import BaseCommand, CommandError
from django.utils import timezone

from hybrid.services.exceptions import (
    DivergenceError,
    FormatError,
    HybridError,
    NumericError,
    ResourceError,
    VerificationError,
)
from hybrid.services.manifest import (
    RUN_MANIFEST_NAME,
    RunManifest,
    hash_artifacts,
    read_manifest,
    write_manifest,
)

logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_VERIFICATION = 5


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, VerificationError):
        return EXIT_VERIFICATION
    if isinstance(exc, (NumericError, DivergenceError, ResourceError)):
        return EXIT_NUMERIC
    if isinstance(exc, (FormatError, OSError)):
        return EXIT_IO
    return EXIT_USAGE


def _jsonable(config: Dict[str, Any]) -> Dict[str, Any]:
    return json.loads(json.dumps(config, default=str))


class HybridCommand(BaseCommand):
    command_name = ''
    required_options: Tuple[str, ...] = ()

    def add_arguments(self, parser):
        parser.add_argument(
            '--from-manifest',
            type=str,
            default=None,
            help='Replay the run recorded in this run.json; explicit flags still override it'
        )
        self.add_run_arguments(parser)

    def add_run_arguments(self, parser) -> None:
        raise NotImplementedError

    def default_options(self) -> Dict[str, Any]:
        """Every run option with its default; read at call time so settings overrides apply."""
        raise NotImplementedError

    def run(self, config: Dict[str, Any]) -> None:
        raise NotImplementedError

    def file_options(self, options: Dict[str, Any]) -> Dict[str, Any]:
        """Options read from a file named on the command line; explicit flags still win."""
        return {}

    def manifest_path(self, config: Dict[str, Any]) -> Path:
        return Path(config['out']) / RUN_MANIFEST_NAME

    # ---------- helpers for subclasses ----------

    def produce(self, *paths: Union[str, Path]) -> None:
        """Register artifacts whose hashes go into the manifest."""
        self.artifacts.extend(Path(p) for p in paths)

    def usage_error(self, message: str) -> CommandError:
        return CommandError(message, returncode=EXIT_USAGE)

    def success(self, message: str) -> None:
        self.stdout.write(self.style.SUCCESS(message))

    def warn(self, message: str) -> None:
        logger.warning(message)
        self.stdout.write(self.style.WARNING(message))

    # ---------- driver ----------

    def resolve_options(self, options: Dict[str, Any]) -> Dict[str, Any]:
        config = self.default_options()
        if options.get('from_manifest'):
            manifest = read_manifest(options['from_manifest'])
            if manifest.command != self.command_name:
                raise self.usage_error(
                    f"{options['from_manifest']} records a {manifest.command!r} run, "
                    f"not {self.command_name!r}"
                )
            config.update({k: v for k, v in manifest.config.items() if k in config})
        explicit = {k: options[k] for k in config if options.get(k) is not None}
        config.update(explicit)
        self.resolved = config
        layered = self.file_options(options)
        if layered:
            config.update({k: v for k, v in layered.items() if k in config})
            config.update(explicit)
        missing = [name for name in self.required_options if config.get(name) is None]
        if missing:
            flags = ", ".join(f"--{m.replace('_', '-')}" for m in missing)
            raise self.usage_error(f"missing required option(s): {flags}")
        return _jsonable(config)

    def handle(self, *args, **options):
        started = timezone.now()
        self.artifacts: List[Path] = []
        self.resolved: Optional[Dict[str, Any]] = None
        config: Optional[Dict[str, Any]] = None
        exit_code = 0
        try:
            config = self.resolve_options(options)
            self.run(config)
        except CommandError as exc:
            exit_code = exc.returncode
            raise
        except (HybridError, OSError) as exc:
            exit_code = exit_code_for(exc)
            logger.error(f"{self.command_name} failed: {exc}")
            raise CommandError(str(exc), returncode=exit_code) from exc
        finally:
            if config is None and self.resolved is not None:
                config = _jsonable(self.resolved)
            if config is not None:
                self._write_manifest(config, started, exit_code)

    def _write_manifest(self, config: Dict[str, Any], started, exit_code: int) -> None:
        manifest = RunManifest(
            command=self.command_name,
            config=config,
            seed=config.get('seed'),
            artifacts=hash_artifacts(self.artifacts),
            started_at=started.isoformat(),
            finished_at=timezone.now().isoformat(),
            exit_code=exit_code,
        )
        try:
            write_manifest(self.manifest_path(config), manifest)
        except OSError as exc:
            logger.warning(f"Could not write the run manifest: {exc}")
