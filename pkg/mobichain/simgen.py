"""Synthetic regional ground truth: complete days from a region profile, degraded into fragments."""
from __future__ import annotations

import json
import logging
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import voluptuous as vol
from scipy.stats import beta as beta_dist

from .activity import Activity, ActivityChain, ActivityType, RegionProfile
from .const import (
    DEFAULT_MIN_OBSERVED_SLOTS,
    NUM_ACTIVITIES,
    PRESETS_DIR,
    SLOT_MINUTES,
    SLOTS_PER_DAY,
)
from .errors import InvalidConfigError, UnknownPresetError
from .utils import child_rng, mask_to_bits, resolve_threads, round_half_up

_LOGGER = logging.getLogger(__name__)

# non-home activities end by this slot so a travel gap and HOME still fit before midnight
_LAST_END = SLOTS_PER_DAY - 2
_DENSITY_FLOOR = 1e-6
_REFERENCE_MONDAY = date(2024, 1, 1)

_POSITIVE = vol.All(vol.Coerce(float), vol.Range(min=0.0, min_included=False))
_NON_NEGATIVE = vol.All(vol.Coerce(float), vol.Range(min=0.0))
_MIXTURE = vol.All([vol.ExactSequence([vol.Coerce(float), _POSITIVE, _NON_NEGATIVE])], vol.Length(min=1))
_ACTIVITY_CODE = vol.All(vol.Coerce(int), vol.Range(min=1, max=NUM_ACTIVITIES), vol.Coerce(str))

PRESET_SCHEMA = vol.Schema(
    {
        vol.Required("name"): str,
        vol.Optional("description", default=""): str,
        vol.Optional("weekend_days", default=[5, 6]): [vol.All(int, vol.Range(min=0, max=6))],
        vol.Optional("home_return_slot", default=84): vol.All(int, vol.Range(min=2, max=_LAST_END)),
        vol.Optional("travel_slots", default=[0.6, 0.3, 0.1]): vol.All([_NON_NEGATIVE], vol.Length(min=1, max=4)),
        vol.Required("first_departure"): _MIXTURE,
        vol.Required("activities"): {
            _ACTIVITY_CODE: {
                vol.Required("start"): _MIXTURE,
                vol.Required("duration"): vol.ExactSequence([_POSITIVE, _NON_NEGATIVE]),
                vol.Optional("weekday", default=1.0): _NON_NEGATIVE,
                vol.Optional("weekend", default=1.0): _NON_NEGATIVE,
            }
        },
        vol.Optional("transitions", default={}): {
            vol.Optional("default", default=1.0): _NON_NEGATIVE,
            vol.Optional("overrides", default={}): {_ACTIVITY_CODE: {_ACTIVITY_CODE: _NON_NEGATIVE}},
        },
    }
)


def available_presets() -> list[str]:
    return sorted(path.stem for path in PRESETS_DIR.glob("*.json"))


def mixture_density(components: Sequence[Sequence[float]]) -> np.ndarray:
    """
    Evaluate a mixture of circular Gaussian bumps on the slot grid.

    Args:
        components: (centre hour, width in hours, weight) triples

    Returns:
        Slot probabilities summing to 1
    """
    hours = (np.arange(SLOTS_PER_DAY) + 0.5) * SLOT_MINUTES / 60.0
    density = np.full(SLOTS_PER_DAY, _DENSITY_FLOOR)
    for centre, width, weight in components:
        distance = np.abs(hours - centre)
        distance = np.minimum(distance, 24.0 - distance)
        density += weight * np.exp(-0.5 * (distance / width) ** 2)
    return density / density.sum()


def _load_preset(preset: str | Path | Mapping[str, Any]) -> dict[str, Any]:
    if isinstance(preset, Mapping):
        return dict(preset)

    path = Path(preset)
    if not path.is_file():
        path = PRESETS_DIR / f"{str(preset).lower()}.json"
    if not path.is_file():
        raise UnknownPresetError(f"Unknown region preset {str(preset)!r}; shipped presets: {', '.join(available_presets())}")
    with open(path, encoding="utf-8") as handle:
        return json.load(handle)


def build_region_profile(preset: str | Path | Mapping[str, Any]) -> RegionProfile:
    """
    Materialise a region profile from a shipped preset name, a JSON file or a parsed mapping.

    Raises:
        UnknownPresetError: If a name matches no shipped preset
        InvalidConfigError: If the preset content is malformed
    """
    try:
        raw = PRESET_SCHEMA(_load_preset(preset))
    except vol.Invalid as err:
        raise InvalidConfigError(f"Invalid region preset {preset!r}: {err}") from err

    activities = raw["activities"]
    missing = [code for code in range(1, NUM_ACTIVITIES + 1) if str(code) not in activities]
    if missing:
        raise InvalidConfigError(f"Region preset {raw['name']} lacks activities {missing}")

    codes = [str(code) for code in range(1, NUM_ACTIVITIES + 1)]
    start_density = np.stack([mixture_density(activities[code]["start"]) for code in codes])
    duration_mean = np.array([activities[code]["duration"][0] for code in codes])
    duration_std = np.array([activities[code]["duration"][1] for code in codes])
    weekday_weights = np.array([activities[code]["weekday"] for code in codes])
    weekend_weights = np.array([activities[code]["weekend"] for code in codes])

    transitions = np.full((NUM_ACTIVITIES, NUM_ACTIVITIES), raw["transitions"]["default"])
    for source, row in raw["transitions"]["overrides"].items():
        for target, weight in row.items():
            transitions[int(source) - 1, int(target) - 1] = weight
    np.fill_diagonal(transitions, 0.0)
    row_sums = transitions.sum(axis=1, keepdims=True)
    if np.any(row_sums <= 0):
        raise InvalidConfigError(f"Region preset {raw['name']}: every activity needs an outgoing transition")
    transitions = transitions / row_sums

    travel = np.asarray(raw["travel_slots"], dtype=np.float64)
    if travel.sum() <= 0:
        raise InvalidConfigError(f"Region preset {raw['name']}: travel gap probabilities are all zero")

    profile = RegionProfile(
        name=raw["name"],
        start_density=start_density,
        duration_mean=duration_mean,
        duration_std=duration_std,
        transitions=transitions,
        weekday_weights=weekday_weights,
        weekend_weights=weekend_weights,
        first_departure=mixture_density(raw["first_departure"]),
        home_return_slot=raw["home_return_slot"],
        travel_slots=tuple(float(p) for p in travel / travel.sum()),
        weekend_days=frozenset(raw["weekend_days"]),
    )
    _LOGGER.debug("Built region profile %s", profile.name)
    return profile


def sample_complete_day(
    profile: RegionProfile,
    day_of_week: int,
    rng: np.random.Generator,
    agent_id: str = "synthetic",
    day: date | None = None,
) -> ActivityChain:
    """
    Walk the profile's transition matrix from HOME at midnight until the evening return.

    Each next activity is drawn in proportion to transition weight, day-type
    preference and the activity's start density at the candidate start slot.
    Activities are separated by 1-4 travel slots and the day always closes at
    HOME at 24:00.

    Args:
        profile: Region profile to sample from
        day_of_week: 0 = Monday
        rng: Random generator; the only source of randomness
        agent_id: Identifier stamped on the chain
        day: Calendar date; defaults to the matching weekday of a reference week

    Returns:
        A complete, valid chain
    """
    if day is None:
        day = _REFERENCE_MONDAY + timedelta(days=day_of_week)
    weights = profile.day_weights(day_of_week)
    travel = np.asarray(profile.travel_slots)
    curfew = min(profile.home_return_slot, _LAST_END)

    def travel_gap() -> int:
        return int(rng.choice(travel.size, p=travel)) + 1

    leave_home = int(rng.choice(SLOTS_PER_DAY, p=profile.first_departure))
    leave_home = min(max(leave_home, 1), curfew - 1)
    episodes: list[list[int]] = [[ActivityType.HOME, 0, leave_home]]
    current, cursor = int(ActivityType.HOME), leave_home

    while True:
        start = cursor + travel_gap()
        if start >= curfew:
            break
        preference = profile.transitions[current - 1] * weights * profile.start_density[:, start]
        total = preference.sum()
        if total <= 0:
            break
        following = int(rng.choice(NUM_ACTIVITIES, p=preference / total)) + 1
        length = max(1, round_half_up(rng.normal(profile.duration_mean[following - 1], profile.duration_std[following - 1])))
        end = min(start + length, _LAST_END)
        episodes.append([following, start, end])
        current, cursor = following, end

    if current == ActivityType.HOME:
        episodes[-1][2] = SLOTS_PER_DAY
    else:
        episodes.append([ActivityType.HOME, min(cursor + travel_gap(), SLOTS_PER_DAY - 1), SLOTS_PER_DAY])

    activities = tuple(Activity(int(code), start * SLOT_MINUTES, end * SLOT_MINUTES) for code, start, end in episodes)
    return ActivityChain(agent_id=agent_id, date=day, activities=activities)


def generate_population(
    profile: RegionProfile,
    agents: int,
    days: int,
    start_date: date = _REFERENCE_MONDAY,
    seed: int = 0,
    threads: int | None = None,
) -> list[ActivityChain]:
    """
    Sample ``days`` consecutive complete days for each of ``agents`` agents.

    Every agent draws from its own generator derived from (seed, agent index),
    so the result does not depend on the thread count.
    """
    if agents < 0 or days < 0:
        raise InvalidConfigError("Agent and day counts must be non-negative")
    dates = [start_date + timedelta(days=offset) for offset in range(days)]

    def agent_days(index: int) -> list[ActivityChain]:
        rng = child_rng(seed, index)
        agent_id = f"{profile.name}-{index:05d}"
        return [sample_complete_day(profile, d.weekday(), rng, agent_id=agent_id, day=d) for d in dates]

    threads = resolve_threads(threads)
    if threads > 1 and agents > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_agent = list(pool.map(agent_days, range(agents)))
    else:
        per_agent = [agent_days(index) for index in range(agents)]

    chains = [chain for agent in per_agent for chain in agent]
    _LOGGER.info("Generated %d complete days for %d agents of region %s", len(chains), agents, profile.name)
    return chains


@dataclass(frozen=True)
class DegradationConfig:
    """Observation model for fragmentary days.

    Daily coverage is Beta distributed with mean ``coverage_mean``; observed
    slots are split into ``1 + Poisson(windows_mean - 1)`` contiguous windows.
    ``windows_mean`` of 0 yields days with nothing observed.
    """

    coverage_mean: float = 0.3
    coverage_concentration: float = 20.0
    windows_mean: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.coverage_mean <= 1.0:
            raise InvalidConfigError(f"coverage_mean must be in (0, 1], got {self.coverage_mean}")
        if self.coverage_concentration <= 0:
            raise InvalidConfigError("coverage_concentration must be positive")
        if self.windows_mean < 0:
            raise InvalidConfigError("windows_mean must be non-negative")

    @property
    def beta_params(self) -> tuple[float, float]:
        return self.coverage_mean * self.coverage_concentration, (1.0 - self.coverage_mean) * self.coverage_concentration

    def share_above(self, min_slots: int = DEFAULT_MIN_OBSERVED_SLOTS) -> float:
        """ Expected share of days keeping at least ``min_slots`` observed slots. """
        if self.coverage_mean >= 1.0:
            return 1.0
        if self.windows_mean == 0:
            return 0.0
        a, b = self.beta_params
        return float(beta_dist.sf((min_slots - 0.5) / SLOTS_PER_DAY, a, b))


def _observation_windows(total: int, count: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    cuts = np.sort(rng.choice(np.arange(1, total), size=count - 1, replace=False)) if count > 1 else np.array([], dtype=int)
    lengths = np.diff(np.concatenate([[0], cuts, [total]]))
    gaps = rng.multinomial(SLOTS_PER_DAY - total, np.full(count + 1, 1.0 / (count + 1)))

    windows = []
    cursor = int(gaps[0])
    for length, gap in zip(lengths, gaps[1:]):
        windows.append((cursor, cursor + int(length)))
        cursor += int(length) + int(gap)
    return windows


def degrade_observation(chain: ActivityChain, cfg: DegradationConfig, rng: np.random.Generator) -> ActivityChain:
    """
    Keep only what falls inside sampled observation windows.

    Activities are truncated to window bounds; the returned chain carries the
    96-character observed mask. A coverage mean of 1.0 returns ``chain`` as is.
    """
    if cfg.coverage_mean >= 1.0:
        return chain

    a, b = cfg.beta_params
    total = round_half_up(rng.beta(a, b) * SLOTS_PER_DAY)
    count = 0 if cfg.windows_mean == 0 else 1 + int(rng.poisson(max(cfg.windows_mean - 1.0, 0.0)))
    count = min(count, total)

    mask = np.zeros(SLOTS_PER_DAY, dtype=bool)
    if count == 0:
        return ActivityChain(chain.agent_id, chain.date, (), mask_to_bits(mask))

    windows = _observation_windows(total, count, rng)
    pieces: list[Activity] = []
    for first, last in windows:
        mask[first:last] = True
        lo_min, hi_min = first * SLOT_MINUTES, last * SLOT_MINUTES
        for activity in chain.activities:
            lo, hi = max(activity.start, lo_min), min(activity.end, hi_min)
            if lo >= hi:
                continue
            if pieces and pieces[-1].type == activity.type and pieces[-1].end == lo:
                pieces[-1] = Activity(activity.type, pieces[-1].start, hi)
            else:
                pieces.append(Activity(activity.type, lo, hi))

    return ActivityChain(chain.agent_id, chain.date, tuple(pieces), mask_to_bits(mask))


def degrade_population(chains: Sequence[ActivityChain], cfg: DegradationConfig, seed: int | None = None) -> list[ActivityChain]:
    seed = cfg.seed if seed is None else seed
    degraded = [degrade_observation(chain, cfg, child_rng(seed, index)) for index, chain in enumerate(chains)]
    if degraded:
        coverage = np.mean([1.0 if c.observed is None else c.observed.count("1") / SLOTS_PER_DAY for c in degraded])
        _LOGGER.info("Degraded %d days to mean coverage %.3f (target %.3f)", len(degraded), coverage, cfg.coverage_mean)
    return degraded
