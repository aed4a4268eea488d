"""96-slot encoding of activity chains, temporal context labels and the three masking strategies."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import date
from enum import StrEnum
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import voluptuous as vol

from .activity import Activity, ActivityChain, observed_mask
from .const import (
    DEFAULT_TRAVEL_CAP_MINUTES,
    MASK_TOKEN,
    NO_TARGET,
    NUM_ACTIVITIES,
    SLOT_MINUTES,
    SLOTS_PER_DAY,
    TIME_SEGMENTS_FILE,
    TRAVEL_TOKEN,
)
from .errors import InvalidConfigError, ShapeMismatchError
from .utils import bits_to_mask, mask_to_bits, parse_hhmm, read_jsonl, round_half_up, write_jsonl

_LOGGER = logging.getLogger(__name__)

SEGMENT_TABLE_SCHEMA = vol.Schema(
    {
        vol.Required("version"): int,
        vol.Required("segments"): [
            {
                vol.Required("start"): str,
                vol.Required("end"): str,
                vol.Required("label"): vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0, min_included=False)),
            }
        ],
    }
)


class MaskStrategy(StrEnum):
    ACTIVITY_BASED = "activity"
    PERIOD = "period"
    TIME_SLOT = "timeslot"


ALL_STRATEGIES: tuple[MaskStrategy, ...] = tuple(MaskStrategy)


@dataclass(frozen=True)
class MaskSpec:
    strategy: MaskStrategy
    fraction: float
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.fraction <= 1.0:
            raise InvalidConfigError(f"Mask fraction must be in [0, 1], got {self.fraction}")
        object.__setattr__(self, "strategy", MaskStrategy(self.strategy))


def load_segment_table(path: str | Path = TIME_SEGMENTS_FILE) -> np.ndarray:
    """
    Load a segment table and expand it to one label per slot.

    Args:
        path: JSON file with consecutive "HH:MM" segments covering the whole day

    Returns:
        Array of 96 time labels

    Raises:
        InvalidConfigError: If the table is malformed or does not tile the day
    """
    try:
        with open(path, encoding="utf-8") as handle:
            raw = SEGMENT_TABLE_SCHEMA(json.load(handle))
    except vol.Invalid as err:
        raise InvalidConfigError(f"Invalid segment table {path}: {err}") from err

    labels = np.full(SLOTS_PER_DAY, np.nan)
    cursor = 0
    for segment in raw["segments"]:
        start, end = parse_hhmm(segment["start"]), parse_hhmm(segment["end"])
        if start != cursor or end <= start or start % SLOT_MINUTES or end % SLOT_MINUTES:
            raise InvalidConfigError(f"Segment table {path}: segments must tile the day on slot boundaries")
        labels[start // SLOT_MINUTES:end // SLOT_MINUTES] = segment["label"]
        cursor = end
    if np.isnan(labels).any():
        raise InvalidConfigError(f"Segment table {path} does not cover the whole day")
    labels.setflags(write=False)
    return labels


@lru_cache(maxsize=1)
def default_segment_table() -> np.ndarray:
    return load_segment_table(TIME_SEGMENTS_FILE)


def temporal_labels(slot_index: int, table: np.ndarray | None = None) -> float:
    """ Time-of-day label of a slot, looked up in the segment table. """
    if not 0 <= slot_index < SLOTS_PER_DAY:
        raise ValueError(f"Slot index {slot_index} outside 0..{SLOTS_PER_DAY - 1}")
    table = default_segment_table() if table is None else table
    return float(table[slot_index])


def round_to_slot(minutes: int) -> int:
    """ Nearest slot boundary index for a time in minutes; ties go down. """
    quotient, remainder = divmod(int(minutes), SLOT_MINUTES)
    return quotient + (1 if 2 * remainder > SLOT_MINUTES else 0)


@dataclass(frozen=True, eq=False)
class SlotSequence:
    """One agent-day as 96 tokens with its observation mask."""

    tokens: np.ndarray
    observed: np.ndarray
    day_of_week: int
    agent_id: str = ""
    date: date | None = None

    def __post_init__(self) -> None:
        tokens = np.asarray(self.tokens, dtype=np.int64)
        observed = np.asarray(self.observed, dtype=bool)
        if tokens.shape != (SLOTS_PER_DAY,) or observed.shape != (SLOTS_PER_DAY,):
            raise ShapeMismatchError("SlotSequence", tokens.shape, observed.shape)
        if np.any(tokens[~observed] != MASK_TOKEN) or np.any(tokens[observed] == MASK_TOKEN):
            raise ValueError("Unobserved slots must carry MASK and observed slots must not")
        tokens.setflags(write=False)
        observed.setflags(write=False)
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "observed", observed)

    @property
    def time_labels(self) -> np.ndarray:
        return default_segment_table()

    @property
    def is_complete(self) -> bool:
        return bool(self.observed.all())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SlotSequence):
            return NotImplemented
        return (
            np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.observed, other.observed)
            and self.day_of_week == other.day_of_week
        )


def encode_day(chain: ActivityChain, travel_cap_minutes: int = DEFAULT_TRAVEL_CAP_MINUTES) -> SlotSequence:
    """
    Encode a validated chain into 96 slot tokens.

    Activity bounds are rounded to the nearest slot. Gaps between consecutive
    activities of at most ``travel_cap_minutes`` become TRAVEL; longer gaps,
    leading and trailing time become MASK. A chain that carries an observation
    bitmask is additionally masked outside it.

    Args:
        chain: A chain that passes validate_chain
        travel_cap_minutes: Longest gap still read as travel

    Returns:
        The encoded SlotSequence
    """
    tokens = np.full(SLOTS_PER_DAY, MASK_TOKEN, dtype=np.int64)
    previous_end: int | None = None

    for activity in chain.activities:
        start, end = round_to_slot(activity.start), round_to_slot(activity.end)
        if end <= start:
            _LOGGER.debug("Activity %s of %s vanishes at slot resolution", activity, chain.agent_id)
            continue
        if previous_end is not None and start > previous_end:
            if (start - previous_end) * SLOT_MINUTES <= travel_cap_minutes:
                tokens[previous_end:start] = TRAVEL_TOKEN
        tokens[start:end] = int(activity.type)
        previous_end = end if previous_end is None else max(previous_end, end)

    observed = tokens != MASK_TOKEN
    window = observed_mask(chain)
    if window is not None:
        observed &= window
        tokens[~observed] = MASK_TOKEN

    return SlotSequence(tokens, observed, chain.day_of_week, chain.agent_id, chain.date)


def decode_slots(seq: SlotSequence) -> ActivityChain:
    """ Turn maximal runs of activity tokens back into a chain; TRAVEL and MASK runs are dropped. """
    activities: list[Activity] = []
    for token, start, end in _runs(seq.tokens):
        if 1 <= token <= NUM_ACTIVITIES:
            activities.append(Activity(int(token), start * SLOT_MINUTES, end * SLOT_MINUTES))
    observed = None if seq.is_complete else mask_to_bits(seq.observed)
    return ActivityChain(seq.agent_id, seq.date or _date_for_weekday(seq.day_of_week), tuple(activities), observed)


def _date_for_weekday(day_of_week: int) -> date:
    # 2024-01-01 is a Monday
    return date(2024, 1, 1 + day_of_week)


def _runs(tokens: np.ndarray) -> list[tuple[int, int, int]]:
    """ (token, first slot, end slot exclusive) for each maximal run. """
    tokens = np.asarray(tokens)
    boundaries = np.flatnonzero(np.diff(tokens)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [len(tokens)]))
    return [(int(tokens[s]), int(s), int(e)) for s, e in zip(starts, ends)]


def slots_to_mask(fraction: float) -> int:
    return round_half_up(SLOTS_PER_DAY * fraction)


def mask_positions(seq_tokens: np.ndarray, seq_observed: np.ndarray, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    """ Boolean slots hidden by one masking strategy (may include already-unobserved slots). """
    hidden = np.zeros(SLOTS_PER_DAY, dtype=bool)
    if spec.fraction <= 0.0:
        return hidden

    if spec.strategy is MaskStrategy.TIME_SLOT:
        hidden[rng.choice(SLOTS_PER_DAY, size=slots_to_mask(spec.fraction), replace=False)] = True

    elif spec.strategy is MaskStrategy.PERIOD:
        length = slots_to_mask(spec.fraction)
        if length > 0:
            start = int(rng.integers(0, SLOTS_PER_DAY - length + 1))
            hidden[start:start + length] = True

    else:
        runs = [(s, e) for token, s, e in _runs(np.where(seq_observed, seq_tokens, MASK_TOKEN)) if token != MASK_TOKEN]
        goal = spec.fraction * SLOTS_PER_DAY
        masked = 0
        for index in rng.permutation(len(runs)):
            if masked >= goal:
                break
            start, end = runs[index]
            hidden[start:end] = True
            masked += end - start

    return hidden


def apply_mask(seq: SlotSequence, spec: MaskSpec, rng: np.random.Generator | None = None) -> tuple[SlotSequence, np.ndarray]:
    """
    Hide slots of a sequence according to a mask spec.

    Args:
        seq: Sequence to mask
        spec: Strategy, fraction and seed
        rng: Generator to draw from; a fresh one seeded from ``spec.rng_seed`` when omitted

    Returns:
        The masked copy and the training target (original tokens on observed slots, 0 elsewhere)
    """
    rng = np.random.default_rng(spec.rng_seed) if rng is None else rng
    hidden = mask_positions(seq.tokens, seq.observed, spec, rng)
    observed = seq.observed & ~hidden
    tokens = np.where(observed, seq.tokens, MASK_TOKEN)
    target = np.where(seq.observed, seq.tokens, NO_TARGET)
    masked = SlotSequence(tokens, observed, seq.day_of_week, seq.agent_id, seq.date)
    return masked, target


@dataclass(eq=False)
class SlotDataset:
    """Batched slot sequences; ``real`` marks observed (1) versus model-filled (0) slots."""

    tokens: np.ndarray
    observed: np.ndarray
    day_of_week: np.ndarray
    real: np.ndarray | None = None
    agent_ids: list[str] = field(default_factory=list)
    dates: list[date | None] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1, SLOTS_PER_DAY)
        self.observed = np.asarray(self.observed, dtype=bool).reshape(-1, SLOTS_PER_DAY)
        self.day_of_week = np.asarray(self.day_of_week, dtype=np.int64).reshape(-1)
        count = len(self.tokens)
        if self.observed.shape[0] != count or self.day_of_week.shape[0] != count:
            raise ShapeMismatchError("SlotDataset", self.tokens.shape, self.observed.shape)
        if self.real is not None:
            self.real = np.asarray(self.real, dtype=bool).reshape(count, SLOTS_PER_DAY)
        if not self.agent_ids:
            self.agent_ids = [""] * count
        if not self.dates:
            self.dates = [None] * count

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def is_complete(self) -> bool:
        return bool(self.observed.all())

    @property
    def real_mask(self) -> np.ndarray:
        return self.observed.copy() if self.real is None else self.real

    @classmethod
    def from_sequences(cls, sequences: Sequence[SlotSequence], real: np.ndarray | None = None) -> SlotDataset:
        if not sequences:
            return cls.empty()
        return cls(
            tokens=np.stack([s.tokens for s in sequences]),
            observed=np.stack([s.observed for s in sequences]),
            day_of_week=np.array([s.day_of_week for s in sequences]),
            real=real,
            agent_ids=[s.agent_id for s in sequences],
            dates=[s.date for s in sequences],
        )

    @classmethod
    def empty(cls) -> SlotDataset:
        return cls(
            np.zeros((0, SLOTS_PER_DAY), dtype=np.int64),
            np.zeros((0, SLOTS_PER_DAY), dtype=bool),
            np.zeros(0, dtype=np.int64),
        )

    def sequence(self, index: int) -> SlotSequence:
        return SlotSequence(
            self.tokens[index], self.observed[index], int(self.day_of_week[index]),
            self.agent_ids[index], self.dates[index],
        )

    def to_sequences(self) -> list[SlotSequence]:
        return [self.sequence(i) for i in range(len(self))]

    def subset(self, indices: Iterable[int]) -> SlotDataset:
        indices = np.asarray(list(indices), dtype=np.int64)
        return SlotDataset(
            self.tokens[indices],
            self.observed[indices],
            self.day_of_week[indices],
            None if self.real is None else self.real[indices],
            [self.agent_ids[i] for i in indices],
            [self.dates[i] for i in indices],
        )

    def concat(self, other: SlotDataset) -> SlotDataset:
        if len(self) == 0:
            return other
        if len(other) == 0:
            return self
        real = None
        if self.real is not None or other.real is not None:
            real = np.concatenate([self.real_mask, other.real_mask])
        return SlotDataset(
            np.concatenate([self.tokens, other.tokens]),
            np.concatenate([self.observed, other.observed]),
            np.concatenate([self.day_of_week, other.day_of_week]),
            real,
            self.agent_ids + other.agent_ids,
            self.dates + other.dates,
        )

    def to_chains(self) -> list[ActivityChain]:
        return [decode_slots(seq) for seq in self.to_sequences()]

    def to_records(self) -> Iterable[dict]:
        for index in range(len(self)):
            record = {
                "tokens": [int(t) for t in self.tokens[index]],
                "observed": mask_to_bits(self.observed[index]),
                "dow": int(self.day_of_week[index]),
            }
            if self.agent_ids[index]:
                record["agent_id"] = self.agent_ids[index]
            if self.dates[index] is not None:
                record["date"] = self.dates[index].isoformat()
            if self.real is not None:
                record["real"] = mask_to_bits(self.real[index])
            yield record


def encode_chains(chains: Iterable[ActivityChain], travel_cap_minutes: int = DEFAULT_TRAVEL_CAP_MINUTES) -> SlotDataset:
    return SlotDataset.from_sequences([encode_day(chain, travel_cap_minutes) for chain in chains])


def write_dataset(path: str | Path, dataset: SlotDataset) -> int:
    return write_jsonl(path, dataset.to_records())


def read_dataset(path: str | Path) -> SlotDataset:
    """ Loads an encoded dataset JSONL file. """
    sequences: list[SlotSequence] = []
    real_rows: list[np.ndarray] = []
    for record in read_jsonl(path):
        record_date = record.get("date")
        sequences.append(SlotSequence(
            np.asarray(record["tokens"], dtype=np.int64),
            bits_to_mask(record["observed"]),
            int(record["dow"]),
            record.get("agent_id", ""),
            date.fromisoformat(record_date) if record_date else None,
        ))
        if "real" in record:
            real_rows.append(bits_to_mask(record["real"]))

    real = np.stack(real_rows) if real_rows and len(real_rows) == len(sequences) else None
    dataset = SlotDataset.from_sequences(sequences, real=real)
    _LOGGER.info("Loaded %d encoded days from %s", len(dataset), path)
    return dataset


@dataclass(frozen=True, eq=False)
class MaskedBatch:
    inputs: np.ndarray
    observed: np.ndarray
    targets: np.ndarray
    strategies: tuple[MaskStrategy, ...]

    @property
    def hidden(self) -> np.ndarray:
        """ Slots that carry a target but were hidden from the model. """
        return (self.targets != NO_TARGET) & ~self.observed


def mask_dataset(
    dataset: SlotDataset,
    fraction: float,
    strategies: Sequence[MaskStrategy] = ALL_STRATEGIES,
    rng: np.random.Generator | None = None,
) -> MaskedBatch:
    """
    Mask every example with a strategy drawn uniformly from ``strategies``.

    Returns:
        Masked input tokens, their observation mask, targets and the strategy used per example
    """
    rng = np.random.default_rng() if rng is None else rng
    inputs = dataset.tokens.copy()
    observed = dataset.observed.copy()
    chosen: list[MaskStrategy] = []

    for index in range(len(dataset)):
        strategy = MaskStrategy(strategies[int(rng.integers(len(strategies)))])
        chosen.append(strategy)
        hidden = mask_positions(dataset.tokens[index], dataset.observed[index], MaskSpec(strategy, fraction), rng)
        observed[index] &= ~hidden
        inputs[index, ~observed[index]] = MASK_TOKEN

    targets = np.where(dataset.observed, dataset.tokens, NO_TARGET)
    return MaskedBatch(inputs, observed, targets, tuple(chosen))
