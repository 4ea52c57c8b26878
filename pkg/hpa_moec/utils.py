"""
Utility functions for the hpa-moec package.
"""
import hashlib
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Sequence, Type, Union

import numpy as np
from decouple import RepositoryEnv

from .exceptions import ConfigError, HpaMoecError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def read_key_values(path: PathLike) -> Dict[str, str]:
    """
    Read a flat ``key=value`` text file.

    Args:
        path: File to read

    Returns:
        Mapping of raw string values in file order

    Raises:
        ConfigError: If the file does not exist
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"File not found: {path}")
    return dict(RepositoryEnv(str(path)).data)


def write_key_values(
    path: PathLike, values: Mapping[str, Any], header: str = ""
) -> Path:
    """
    Write a flat ``key=value`` text file that ``read_key_values`` reads back.

    Args:
        path: Destination file
        values: Values to write, formatted with ``format_value``
        header: Optional comment written on the first line

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {header}"] if header else []
    lines.extend(f"{key}={format_value(value)}" for key, value in values.items())
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def format_value(value: Any) -> str:
    """Format a config value the way config files spell it."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple, np.ndarray)):
        return ",".join(format_value(item) for item in value)
    return str(value)


def file_sha256(path: PathLike) -> str:
    """Return the hex SHA-256 digest of a file."""
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def text_sha256(text: str) -> str:
    """Return the hex SHA-256 digest of a text block."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def spawn_seeds(seed: int, count: int) -> List[int]:
    """
    Derive independent child seeds from one run seed.

    Args:
        seed: Root seed
        count: Number of child seeds

    Returns:
        Deterministic list of 32-bit seeds
    """
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(child.generate_state(1)[0]) for child in children]


def quartiles(values: Sequence[float]) -> Dict[str, float]:
    """Return min, quartiles and max of a sample for boxplot-style export."""
    data = np.asarray(values, dtype=float)
    if data.size == 0:
        return {}
    q = np.percentile(data, [0, 25, 50, 75, 100])
    return dict(zip(("min", "q1", "median", "q3", "max"), (float(v) for v in q)))


def require_keys(
    mapping: Mapping[str, Any],
    keys: Iterable[str],
    what: str,
    error: Type[HpaMoecError] = ConfigError,
) -> None:
    """
    Check that required keys are present.

    Raises:
        ConfigError: Listing every missing key (or the given error class)
    """
    missing = [key for key in keys if key not in mapping]
    if missing:
        raise error(f"{what} missing required keys: {', '.join(missing)}")
