"""Domain vocabulary shared by every stage: activity codes, chains, stays and region profiles."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import date
from enum import IntEnum
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .const import MINUTES_PER_DAY, NUM_ACTIVITIES, SLOTS_PER_DAY
from .errors import (
    ChainValidationError,
    ChainViolationError,
    InvalidCodeError,
    InvalidConfigError,
    NonMonotoneTimesError,
    OverlappingActivitiesError,
    TimeOutOfRangeError,
)
from .utils import bits_to_mask, format_hhmm, mask_to_bits, parse_hhmm, read_jsonl, write_jsonl

_LOGGER = logging.getLogger(__name__)


class ActivityType(IntEnum):
    HOME = 1
    WORK = 2
    SCHOOL = 3
    CARE = 4
    BUY_GOODS = 5
    BUY_SERVICES = 6
    BUY_MEALS = 7
    ERRANDS = 8
    RECREATION = 9
    EXERCISE = 10
    VISIT = 11
    HEALTH_CARE = 12
    RELIGIOUS = 13
    OTHER = 14
    PICK_DROP = 15
    # slot tokens, never chain activities
    TRAVEL = 16
    MASK = 17

    @property
    def is_activity(self) -> bool:
        return 1 <= self.value <= NUM_ACTIVITIES


ACTIVITY_DESCRIPTIONS: dict[ActivityType, str] = {
    ActivityType.HOME: "Home activities (sleep, chores, etc) or Work from home",
    ActivityType.WORK: "Work-related activity or Volunteer",
    ActivityType.SCHOOL: "Attend school",
    ActivityType.CARE: "Attend child or adult care",
    ActivityType.BUY_GOODS: "Buy goods (groceries, clothes, gas)",
    ActivityType.BUY_SERVICES: "Buy services (dry cleaners, banking, service a car)",
    ActivityType.BUY_MEALS: "Buy meals (go out for a meal, food, carry-out)",
    ActivityType.ERRANDS: "General errands (post office, library)",
    ActivityType.RECREATION: "Recreational activities (visit parks, movies, bars)",
    ActivityType.EXERCISE: "Exercise (jog/walk, walk the dog, gym, etc)",
    ActivityType.VISIT: "Visit friends or relatives",
    ActivityType.HEALTH_CARE: "Health care visit (medical, dental, therapy)",
    ActivityType.RELIGIOUS: "Religious or community activities",
    ActivityType.OTHER: "Something else",
    ActivityType.PICK_DROP: "Drop off/pick up someone",
}

MANDATORY_TYPES = frozenset({ActivityType.HOME, ActivityType.WORK, ActivityType.SCHOOL})


@dataclass(frozen=True)
class Activity:
    """One activity of a chain; ``end`` is exclusive, times in minutes from midnight."""

    type: int
    start: int
    end: int

    @property
    def duration(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class ActivityChain:
    """Time-ordered activities of one agent-day.

    ``observed`` optionally carries the 96-character observation bitmask of a
    fragmentary day; complete days leave it ``None``.
    """

    agent_id: str
    date: date
    activities: tuple[Activity, ...] = ()
    observed: str | None = None

    @property
    def day_of_week(self) -> int:
        return self.date.weekday()

    @property
    def observed_slots(self) -> int | None:
        if self.observed is None:
            return None
        return self.observed.count("1")

    def to_record(self) -> dict[str, Any]:
        record: dict[str, Any] = {
            "agent_id": self.agent_id,
            "date": self.date.isoformat(),
            "activities": [
                {"type": int(a.type), "start": format_hhmm(a.start), "end": format_hhmm(a.end)}
                for a in self.activities
            ],
        }
        if self.observed is not None:
            record["observed"] = self.observed
        return record

    @classmethod
    def from_record(cls, record: dict[str, Any]) -> ActivityChain:
        try:
            activities = tuple(
                Activity(int(item["type"]), parse_hhmm(item["start"]), parse_hhmm(item["end"]))
                for item in record.get("activities", [])
            )
            observed = record.get("observed")
            if observed is not None:
                bits_to_mask(observed)
            return cls(
                agent_id=str(record["agent_id"]),
                date=date.fromisoformat(record["date"]),
                activities=activities,
                observed=observed,
            )
        except (KeyError, TypeError, ValueError) as err:
            raise ChainValidationError([ChainViolationError(f"Malformed chain record: {err}")]) from err


@dataclass(frozen=True)
class StayPoint:
    """A dwell episode; ``arrive``/``depart`` are epoch seconds."""

    agent_id: str
    arrive: int
    depart: int
    centroid: tuple[float, float]
    region_id: str | None = None
    activity: int | None = None
    records: int = 1

    @property
    def duration_s(self) -> int:
        return self.depart - self.arrive


@dataclass(frozen=True)
class RegionProfile:
    """Parametric description of a region's daily activity pattern.

    Arrays are indexed by ``code - 1``: ``start_density`` is [15 x 96],
    ``duration_mean``/``duration_std`` are in slots, ``transitions`` is a
    row-stochastic [15 x 15] matrix and the day weights multiply the
    preference for each next activity on weekdays and weekends.
    """

    name: str
    start_density: np.ndarray
    duration_mean: np.ndarray
    duration_std: np.ndarray
    transitions: np.ndarray
    weekday_weights: np.ndarray
    weekend_weights: np.ndarray
    first_departure: np.ndarray = field(default_factory=lambda: np.full(SLOTS_PER_DAY, 1.0 / SLOTS_PER_DAY))
    home_return_slot: int = 84
    travel_slots: tuple[float, ...] = (0.6, 0.3, 0.1)
    weekend_days: frozenset[int] = frozenset({5, 6})

    def __post_init__(self) -> None:
        shape_checks = {
            "start_density": (self.start_density, (NUM_ACTIVITIES, SLOTS_PER_DAY)),
            "duration_mean": (self.duration_mean, (NUM_ACTIVITIES,)),
            "duration_std": (self.duration_std, (NUM_ACTIVITIES,)),
            "transitions": (self.transitions, (NUM_ACTIVITIES, NUM_ACTIVITIES)),
            "weekday_weights": (self.weekday_weights, (NUM_ACTIVITIES,)),
            "weekend_weights": (self.weekend_weights, (NUM_ACTIVITIES,)),
            "first_departure": (self.first_departure, (SLOTS_PER_DAY,)),
        }
        for name, (array, shape) in shape_checks.items():
            if np.shape(array) != shape:
                raise InvalidConfigError(f"Region profile {self.name}: {name} must have shape {shape}")
        if not np.allclose(self.start_density.sum(axis=1), 1.0, rtol=0.0, atol=1e-9):
            raise InvalidConfigError(f"Region profile {self.name}: start densities must sum to 1")
        if not np.allclose(self.transitions.sum(axis=1), 1.0, rtol=0.0, atol=1e-9):
            raise InvalidConfigError(f"Region profile {self.name}: transition rows must sum to 1")
        if abs(float(self.first_departure.sum()) - 1.0) > 1e-9:
            raise InvalidConfigError(f"Region profile {self.name}: first departure density must sum to 1")
        if len(self.travel_slots) > 4 or abs(sum(self.travel_slots) - 1.0) > 1e-9:
            raise InvalidConfigError(f"Region profile {self.name}: travel gap probabilities must cover 1..4 slots and sum to 1")
        if not self.weekend_days <= frozenset(range(7)):
            raise InvalidConfigError(f"Region profile {self.name}: weekend days must be weekday numbers 0..6")
        for array in shape_checks.values():
            array[0].setflags(write=False)

    def day_weights(self, day_of_week: int) -> np.ndarray:
        return self.weekend_weights if day_of_week in self.weekend_days else self.weekday_weights


def check_chain(chain: ActivityChain) -> list[ChainViolationError]:
    """
    Collect every invariant violation of a chain without raising.

    Args:
        chain: Chain to check

    Returns:
        The violations found, in activity order; empty when the chain is valid
    """
    violations: list[ChainViolationError] = []
    previous: Activity | None = None

    for index, activity in enumerate(chain.activities):
        if not 1 <= int(activity.type) <= NUM_ACTIVITIES:
            violations.append(InvalidCodeError(f"activity {index}: code {activity.type} is not in 1..{NUM_ACTIVITIES}"))
        if activity.start < 0 or activity.end > MINUTES_PER_DAY or activity.end < 0 or activity.start > MINUTES_PER_DAY:
            violations.append(TimeOutOfRangeError(
                f"activity {index}: {activity.start}-{activity.end} outside 0..{MINUTES_PER_DAY}"))
        if activity.start >= activity.end:
            violations.append(NonMonotoneTimesError(
                f"activity {index}: start {format_hhmm(activity.start)} is not before end {format_hhmm(activity.end)}"))

        if previous is not None:
            if activity.start < previous.start:
                violations.append(NonMonotoneTimesError(f"activity {index}: starts before activity {index - 1}"))
            elif activity.start < previous.end:
                violations.append(OverlappingActivitiesError(
                    f"activity {index}: starts at {format_hhmm(activity.start)} before activity {index - 1} ends at {format_hhmm(previous.end)}"))
        previous = activity

    return violations


def validate_chain(chain: ActivityChain) -> ActivityChain:
    """
    Return the chain unchanged if it satisfies every invariant.

    Raises:
        ChainValidationError: With the list of violations otherwise
    """
    violations = check_chain(chain)
    if violations:
        raise ChainValidationError(violations)
    return chain


def read_chains(path: str | Path, validate: bool = True) -> list[ActivityChain]:
    """ Loads a chain JSONL file, validating each chain unless told otherwise. """
    chains = [ActivityChain.from_record(record) for record in read_jsonl(path)]
    if validate:
        for chain in chains:
            validate_chain(chain)
    _LOGGER.info("Loaded %d chains from %s", len(chains), path)
    return chains


def write_chains(path: str | Path, chains: Iterable[ActivityChain]) -> int:
    return write_jsonl(path, (chain.to_record() for chain in chains))


def observed_mask(chain: ActivityChain) -> np.ndarray | None:
    """ Boolean slot mask of the chain's observation windows, if it carries one. """
    if chain.observed is None:
        return None
    return bits_to_mask(chain.observed)


def with_observed(chain: ActivityChain, mask: np.ndarray) -> ActivityChain:
    return ActivityChain(chain.agent_id, chain.date, chain.activities, mask_to_bits(mask))
