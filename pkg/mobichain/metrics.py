"""Jensen-Shannon divergence over activity statistics of two chain collections."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import pandas as pd
from scipy.special import rel_entr

from .activity import ActivityChain
from .const import LENGTH_BINS, NUM_ACTIVITIES, SLOTS_PER_DAY, STAT_NAMES
from .encoding import round_to_slot
from .errors import EmptyCollectionError, LengthMismatchError, NotNormalizedError
from .utils import json_digest

_LOGGER = logging.getLogger(__name__)

_NORMALIZATION_TOLERANCE = 1e-6

# first CSV column per statistic
_BIN_COLUMNS = {"length": "activities", "duration": "slots", "type": "code", "start": "slot", "end": "slot"}


def jsd(p: Sequence[float] | np.ndarray, q: Sequence[float] | np.ndarray) -> float:
    """
    Base-2 Jensen-Shannon divergence of two probability vectors.

    Args:
        p: Probabilities summing to 1
        q: Probabilities of the same length summing to 1

    Returns:
        Divergence in [0, 1]; 0 for identical inputs

    Raises:
        LengthMismatchError: If the vectors differ in length
        NotNormalizedError: If either vector is negative somewhere or does not sum to 1
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise LengthMismatchError(f"Distributions have lengths {p.size} and {q.size}")
    for name, dist in (("P", p), ("Q", q)):
        if np.any(dist < 0) or abs(dist.sum() - 1.0) > _NORMALIZATION_TOLERANCE:
            raise NotNormalizedError(f"{name} sums to {dist.sum():.9f}, expected 1")

    mixture = (p + q) / 2.0
    value = 0.5 * (rel_entr(p, mixture).sum() + rel_entr(q, mixture).sum()) / math.log(2.0)
    return float(min(max(value, 0.0), 1.0))


@dataclass(frozen=True, eq=False)
class Histogram:
    name: str
    bins: np.ndarray
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def probabilities(self) -> np.ndarray:
        return self.counts / self.counts.sum()


def _empty_histograms() -> dict[str, np.ndarray]:
    return {
        "length": np.zeros(LENGTH_BINS, dtype=np.int64),
        "duration": np.zeros(SLOTS_PER_DAY, dtype=np.int64),
        "type": np.zeros(NUM_ACTIVITIES, dtype=np.int64),
        "start": np.zeros(SLOTS_PER_DAY, dtype=np.int64),
        "end": np.zeros(SLOTS_PER_DAY, dtype=np.int64),
    }


_BINS = {
    "length": np.arange(1, LENGTH_BINS + 1),
    "duration": np.arange(1, SLOTS_PER_DAY + 1),
    "type": np.arange(1, NUM_ACTIVITIES + 1),
    "start": np.arange(SLOTS_PER_DAY),
    "end": np.arange(SLOTS_PER_DAY),
}


def extract_statistics(chains: Iterable[ActivityChain]) -> dict[str, Histogram]:
    """
    Build the five activity histograms of a collection.

    Bins: activities per day 1..12 and 13+; activity codes 1..15; start and
    end slot 0..95 (end is the last covered slot); duration 1..96 slots.

    Raises:
        EmptyCollectionError: If the collection holds no activity at all
    """
    counts = _empty_histograms()
    chain_count = 0

    for chain in chains:
        chain_count += 1
        if not chain.activities:
            continue
        counts["length"][min(len(chain.activities), LENGTH_BINS) - 1] += 1
        for activity in chain.activities:
            start_slot = min(round_to_slot(activity.start), SLOTS_PER_DAY - 1)
            end_slot = min(max(round_to_slot(activity.end) - 1, start_slot), SLOTS_PER_DAY - 1)
            duration = min(max(end_slot - start_slot + 1, 1), SLOTS_PER_DAY)
            counts["type"][int(activity.type) - 1] += 1
            counts["start"][start_slot] += 1
            counts["end"][end_slot] += 1
            counts["duration"][duration - 1] += 1

    if chain_count == 0 or counts["type"].sum() == 0:
        raise EmptyCollectionError("No activities to build statistics from")
    return {name: Histogram(name, _BINS[name], counts[name]) for name in STAT_NAMES}


def coverage_share(chains: Sequence[ActivityChain]) -> float:
    """ Mean share of observed slots; chains without an observation mask count as complete. """
    if not chains:
        return 0.0
    shares = [1.0 if c.observed is None else c.observed.count("1") / SLOTS_PER_DAY for c in chains]
    return float(np.mean(shares))


@dataclass(frozen=True)
class JsdReport:
    jsd_length: float
    jsd_duration: float
    jsd_type: float
    jsd_start: float
    jsd_end: float
    n_generated: int = 0
    n_reference: int = 0
    generated_coverage: float = 1.0
    reference_coverage: float = 1.0
    config_digest: str = ""
    strategies: tuple[str, ...] = ()
    mask_fraction: float | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def values(self) -> dict[str, float]:
        return {name: getattr(self, f"jsd_{name}") for name in STAT_NAMES}

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.values.values())))

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["strategies"] = list(self.strategies)
        data["mean"] = self.mean
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> JsdReport:
        data = {k: v for k, v in data.items() if k != "mean"}
        data["strategies"] = tuple(data.get("strategies", ()))
        return cls(**data)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def evaluate(
    generated: Sequence[ActivityChain],
    reference: Sequence[ActivityChain],
    config: dict[str, Any] | None = None,
    strategies: Sequence[str] = (),
    mask_fraction: float | None = None,
) -> JsdReport:
    """
    Compare two collections on all five statistics.

    Args:
        generated: Reconstructed or synthesised chains
        reference: Ground truth; fragmentary chains contribute their observed activities
        config: Configuration whose digest is stamped on the report
        strategies: Masking strategies used to produce ``generated``, for provenance
        mask_fraction: Mask fraction used, for provenance

    Returns:
        The JSD report
    """
    if not generated or not reference:
        raise EmptyCollectionError("Both collections must be non-empty")
    gen_stats = extract_statistics(generated)
    ref_stats = extract_statistics(reference)
    values = {name: jsd(gen_stats[name].probabilities, ref_stats[name].probabilities) for name in STAT_NAMES}

    report = JsdReport(
        **{f"jsd_{name}": value for name, value in values.items()},
        n_generated=len(generated),
        n_reference=len(reference),
        generated_coverage=coverage_share(generated),
        reference_coverage=coverage_share(reference),
        config_digest=json_digest(config or {}),
        strategies=tuple(str(s) for s in strategies),
        mask_fraction=mask_fraction,
    )
    _LOGGER.info(
        "JSD length=%.4f duration=%.4f type=%.4f start=%.4f end=%.4f (n=%d vs %d)",
        report.jsd_length, report.jsd_duration, report.jsd_type, report.jsd_start, report.jsd_end,
        report.n_generated, report.n_reference,
    )
    return report


def activity_start_jsd(generated: Iterable[ActivityChain], reference: Iterable[ActivityChain]) -> dict[int, float]:
    """ Start-slot JSD per activity code, for codes present in both collections. """
    def per_code(chains: Iterable[ActivityChain]) -> np.ndarray:
        counts = np.zeros((NUM_ACTIVITIES, SLOTS_PER_DAY), dtype=np.int64)
        for chain in chains:
            for activity in chain.activities:
                counts[int(activity.type) - 1, min(round_to_slot(activity.start), SLOTS_PER_DAY - 1)] += 1
        return counts

    gen_counts, ref_counts = per_code(generated), per_code(reference)
    result: dict[int, float] = {}
    for index in range(NUM_ACTIVITIES):
        if gen_counts[index].sum() and ref_counts[index].sum():
            result[index + 1] = jsd(gen_counts[index] / gen_counts[index].sum(), ref_counts[index] / ref_counts[index].sum())
    return result


def write_histogram_csvs(report_dir: str | Path, generated: Sequence[ActivityChain], reference: Sequence[ActivityChain]) -> list[Path]:
    """
    Write one plot-ready CSV per statistic with generated and reference probabilities.

    Returns:
        The written paths, in statistic order
    """
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    gen_stats, ref_stats = extract_statistics(generated), extract_statistics(reference)
    paths: list[Path] = []
    for name in STAT_NAMES:
        frame = pd.DataFrame({
            _BIN_COLUMNS[name]: gen_stats[name].bins,
            "p_generated": gen_stats[name].probabilities,
            "p_reference": ref_stats[name].probabilities,
        })
        path = report_dir / f"{name}.csv"
        frame.to_csv(path, index=False, float_format="%.10g")
        paths.append(path)
    return paths
