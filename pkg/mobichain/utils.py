from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from collections.abc import Iterable, Iterator
from pathlib import Path
from typing import Any

import numpy as np

from .const import EARTH_RADIUS_M, ENV_THREADS, MINUTES_PER_DAY, SLOTS_PER_DAY

_LOGGER = logging.getLogger(__name__)


def parse_hhmm(text: str) -> int:
    """
    Parse an "HH:MM" clock string into minutes from midnight.

    "24:00" is accepted as the end of the day.

    Args:
        text: Clock time such as "08:30"

    Returns:
        Minutes from midnight in 0..1440

    Raises:
        ValueError: If the string is not a valid clock time
    """
    try:
        hours_str, minutes_str = text.strip().split(":")
        hours, minutes = int(hours_str), int(minutes_str)
    except (AttributeError, ValueError) as err:
        raise ValueError(f"Invalid clock time {text!r}") from err

    if not 0 <= minutes < 60 or not 0 <= hours <= 24:
        raise ValueError(f"Invalid clock time {text!r}")
    total = hours * 60 + minutes
    if total > MINUTES_PER_DAY:
        raise ValueError(f"Invalid clock time {text!r}")
    return total


def format_hhmm(minutes: int) -> str:
    """ Formats minutes from midnight as "HH:MM" ("24:00" for the end of the day). """
    hours, rest = divmod(int(minutes), 60)
    return f"{hours:02d}:{rest:02d}"


def round_half_up(value: float) -> int:
    """ Rounds to the nearest integer with halves going up. """
    return int(math.floor(value + 0.5))


def haversine_m(lat1, lon1, lat2, lon2):
    """
    Great-circle distance in meters; works on scalars and numpy arrays alike.
    """
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(v, dtype=np.float64)) for v in (lat1, lon1, lat2, lon2))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    a = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    distance = 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    if distance.ndim == 0:
        return float(distance)
    return distance


def mask_to_bits(mask: Iterable[bool]) -> str:
    """ Serializes a slot mask as a string of 0/1 characters. """
    return "".join("1" if bool(v) else "0" for v in mask)


def bits_to_mask(bits: str) -> np.ndarray:
    """ Parses a 96-character 0/1 string into a boolean slot mask. """
    if len(bits) != SLOTS_PER_DAY or set(bits) - {"0", "1"}:
        raise ValueError(f"Observed mask must be {SLOTS_PER_DAY} characters of 0/1, got {bits[:20]!r}...")
    return np.frombuffer(bits.encode("ascii"), dtype=np.uint8) == ord("1")


def read_jsonl(path: str | Path) -> Iterator[dict[str, Any]]:
    """ Yields one record per non-empty line of a JSON-lines file. """
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as err:
                raise ValueError(f"{path}:{line_no}: invalid JSON record: {err}") from err


def write_jsonl(path: str | Path, records: Iterable[dict[str, Any]]) -> int:
    """ Writes records as JSON lines and returns how many were written. """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record, separators=(",", ":"), sort_keys=True))
            handle.write("\n")
            count += 1
    _LOGGER.debug("Wrote %d records to %s", count, path)
    return count


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)


def json_digest(data: Any) -> str:
    """ SHA-256 of the canonical JSON form of ``data``. """
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def file_digest(path: str | Path) -> str:
    """ SHA-256 of a file's bytes. """
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def resolve_threads(threads: int | None) -> int:
    """
    Number of worker threads: the explicit value, else MOBICHAIN_THREADS, else 1.
    """
    if threads is not None and threads > 0:
        return int(threads)
    env_value = os.environ.get(ENV_THREADS)
    if env_value:
        try:
            return max(1, int(env_value))
        except ValueError:
            _LOGGER.warning("Ignoring non-integer %s=%r", ENV_THREADS, env_value)
    return 1


def child_rng(seed: int, *keys: int) -> np.random.Generator:
    """ Independent generator for a (seed, key...) unit of work. """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(int(k) for k in keys)]))
