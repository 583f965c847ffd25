"""Common errors and utilities shared by every forceflow module."""

import hashlib
import json
import os
import subprocess
from functools import lru_cache
from typing import Any, Dict

from forceflow import __version__

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class ForceFlowError(Exception):
    """Base class for all forceflow errors."""
    exit_code = EXIT_RUNTIME


class ValidationError(ForceFlowError):
    """Bad input: configuration, arguments or files."""
    exit_code = EXIT_VALIDATION


class InvalidSizeError(ValidationError):
    pass


class InvalidArgumentError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class ContainerError(ValidationError):
    """Container manifest or checksum does not validate."""
    pass


class NormalizationMismatchError(ValidationError):
    pass


class ModelError(ForceFlowError):
    """Runtime failure of the simulation, generation or learning pipeline."""
    exit_code = EXIT_RUNTIME


class NoContactError(ModelError):
    pass


class DegenerateDemoError(ModelError):
    pass


class SimulationDivergedError(ModelError):
    pass


class ExpertFailedError(ModelError):
    pass


class EmptyCloudError(ModelError):
    pass


class ZeroDirectionError(ModelError):
    pass


class TrainingDivergedError(ModelError):
    """Loss became non-finite."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


def derive_seed(master_seed: int, index: int, label: str = "") -> int:
    """
    Derive an independent 63-bit seed for item `index` of a run.
    Uses SHA-256 so results do not depend on scheduling order.
    """
    key = f"{master_seed}:{label}:{index}"
    hash_bytes = hashlib.sha256(key.encode('utf-8')).digest()
    return int.from_bytes(hash_bytes[:8], byteorder='little') >> 1


def canonical_json(data: Any) -> str:
    """JSON with sorted keys and fixed separators, stable across runs."""
    return json.dumps(data, sort_keys=True, indent=2, separators=(',', ': '))


def config_hash(resolved: Dict[str, Any]) -> str:
    """SHA-256 hex digest of a resolved configuration mapping."""
    return hashlib.sha256(canonical_json(resolved).encode('utf-8')).hexdigest()


@lru_cache(maxsize=None)
def describe_version() -> str:
    """git-describe-style version string, falling back to the package version."""
    try:
        out = subprocess.run(
            ['git', 'describe', '--always', '--dirty', '--tags'],
            capture_output=True, text=True, timeout=5, check=True,
            cwd=os.path.dirname(os.path.abspath(__file__))
        )
        described = out.stdout.strip()
        if described:
            return f"v{__version__}-{described}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def provenance(config_digest: str = "") -> str:
    """`version=... config_hash=...` stamp identifying the code and config behind an artifact."""
    return f"version={describe_version()} config_hash={config_digest or 'none'}"


def provenance_header(config_digest: str = "") -> str:
    """Comment line written above the header row of every CSV artifact."""
    return f"# {provenance(config_digest)}\n"


def svg_metadata(config_digest: str = "") -> Dict[str, Any]:
    """SVG metadata with the provenance stamp and no timestamp."""
    return {'Date': None, 'Description': provenance(config_digest)}


def write_csv_frame(frame: Any, path: str, config_digest: str = ""):
    """Write a DataFrame as CSV below the provenance line."""
    with open(path, 'w', newline='') as f:
        f.write(provenance_header(config_digest))
        frame.to_csv(f, index=False, float_format='%.9g')
