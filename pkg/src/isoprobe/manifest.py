"""Run manifests, content hashing, atomic writes, and config parsing.

Every command writes a manifest listing its config snapshot, seeds, and
the SHA-256 of each input and output file; a consumer verifies the
recorded hashes before trusting upstream artifacts.  Configs are flat
`key = value` text files (values in JSON syntax) with flag overrides
applied on top.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .errors import ConfigError, MissingInputError, StaleArtifactError

MANIFEST_NAME = "manifest.json"
SCHEMA_VERSION = 1


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


def sha256_file(path):
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"missing file: {path}")
    digest = hashlib.sha256()
    with path.open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def atomic_write_bytes(path, data):
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text):
    return atomic_write_bytes(path, text.encode())


def canonical_json(obj):
    """Stable key order, trailing newline; floats via repr round-trip."""
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


@dataclass
class RunManifest:
    """What a command ran with and what it produced, hash by hash."""

    command: str
    config: dict
    seed: int
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    version: str = __version__
    schema_version: int = SCHEMA_VERSION

    def record_input(self, base_dir, path):
        self.inputs[self._rel(base_dir, path)] = sha256_file(path)

    def record_output(self, base_dir, path):
        self.outputs[self._rel(base_dir, path)] = sha256_file(path)

    @staticmethod
    def _rel(base_dir, path):
        path = Path(path).resolve()
        base = Path(base_dir).resolve()
        try:
            return path.relative_to(base).as_posix()
        except ValueError:
            return path.as_posix()

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "command": self.command,
            "version": self.version,
            "seed": self.seed,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
        }

    def write(self, out_dir):
        path = Path(out_dir) / MANIFEST_NAME
        atomic_write_text(path, canonical_json(self.to_dict()))
        return path

    @classmethod
    def read(cls, out_dir):
        path = Path(out_dir) / MANIFEST_NAME
        if not path.is_file():
            raise MissingInputError(f"no manifest at {path}")
        raw = json.loads(path.read_text())
        return cls(
            command=raw["command"],
            config=raw["config"],
            seed=raw["seed"],
            inputs=raw.get("inputs", {}),
            outputs=raw.get("outputs", {}),
            version=raw.get("version", "unknown"),
            schema_version=raw.get("schema_version", 0),
        )


def verify_outputs(manifest, base_dir):
    """Check that every artifact a manifest declares still hash-matches."""
    for rel, recorded in manifest.outputs.items():
        path = Path(base_dir) / rel
        if not path.is_file():
            raise MissingInputError(f"missing upstream artifact: {path}")
        actual = sha256_file(path)
        if actual != recorded:
            raise StaleArtifactError(
                f"stale artifact {path}: recorded {recorded[:12]}.., found {actual[:12]}.."
            )


def parse_config(path):
    """Parse a flat `key = value` config file.

    Values use JSON syntax (numbers, strings, booleans, lists); bare
    words parse as strings.  Full-line comments start with '#'.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    config = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        value = value.strip()
        try:
            config[key] = json.loads(value)
        except json.JSONDecodeError:
            config[key] = value
    return config


def take_config(config, key, default=None, *, required=False, kind=None):
    """Fetch a config value with type checking; errors name the field."""
    if key not in config:
        if required:
            raise ConfigError(f"missing required config field: {key}")
        return default
    value = config[key]
    if kind is int and isinstance(value, bool):
        raise ConfigError(f"config field {key}: expected int, got bool")
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is not None and not isinstance(value, kind):
        raise ConfigError(
            f"config field {key}: expected {getattr(kind, '__name__', kind)}, "
            f"got {type(value).__name__}"
        )
    return value
