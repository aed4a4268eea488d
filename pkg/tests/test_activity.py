from __future__ import annotations

from datetime import date

import numpy as np
import pytest

from mobichain.activity import (
    Activity,
    ActivityChain,
    ActivityType,
    MANDATORY_TYPES,
    RegionProfile,
    check_chain,
    observed_mask,
    read_chains,
    validate_chain,
    with_observed,
    write_chains,
)
from mobichain.errors import (
    ChainValidationError,
    InvalidCodeError,
    InvalidConfigError,
    NonMonotoneTimesError,
    OverlappingActivitiesError,
    TimeOutOfRangeError,
)


def test_activity_codes():
    assert [t for t in ActivityType if t.is_activity] == list(ActivityType)[:15]
    assert not ActivityType.TRAVEL.is_activity
    assert not ActivityType.MASK.is_activity
    assert MANDATORY_TYPES == {ActivityType.HOME, ActivityType.WORK, ActivityType.SCHOOL}


def test_record_form(home_then_exercise):
    record = home_then_exercise.to_record()
    assert record == {
        "agent_id": "agent-1",
        "date": "2024-01-01",
        "activities": [
            {"type": 1, "start": "00:00", "end": "10:00"},
            {"type": 10, "start": "10:30", "end": "11:00"},
        ],
    }
    assert ActivityChain.from_record(record) == home_then_exercise
    assert home_then_exercise.day_of_week == 0


def test_from_record_malformed():
    with pytest.raises(ChainValidationError):
        ActivityChain.from_record({"agent_id": "x", "date": "2024-01-01", "activities": [{"type": 1, "start": "25:00", "end": "26:00"}]})
    with pytest.raises(ChainValidationError):
        ActivityChain.from_record({"agent_id": "x", "activities": []})
    with pytest.raises(ChainValidationError):
        ActivityChain.from_record({"agent_id": "x", "date": "2024-01-01", "observed": "101"})


def test_valid_chain(workday):
    assert check_chain(workday) == []
    assert validate_chain(workday) is workday


@pytest.mark.parametrize(
    "activities,error",
    [
        ((Activity(16, 0, 60),), InvalidCodeError),
        ((Activity(0, 0, 60),), InvalidCodeError),
        ((Activity(1, 0, 1500),), TimeOutOfRangeError),
        ((Activity(1, 120, 60),), NonMonotoneTimesError),
        ((Activity(1, 0, 120), Activity(2, 60, 180)), OverlappingActivitiesError),
        ((Activity(1, 300, 400), Activity(2, 0, 60)), NonMonotoneTimesError),
    ],
)
def test_check_chain_violations(activities, error):
    chain = ActivityChain("a", date(2024, 1, 1), activities)
    violations = check_chain(chain)
    assert any(isinstance(v, error) for v in violations)
    with pytest.raises(ChainValidationError) as excinfo:
        validate_chain(chain)
    assert [str(v) for v in excinfo.value.violations] == [str(v) for v in violations]


def test_check_chain_collects_everything():
    chain = ActivityChain("a", date(2024, 1, 1), (Activity(99, 0, 60), Activity(1, 30, 20)))
    kinds = {type(v) for v in check_chain(chain)}
    assert {InvalidCodeError, NonMonotoneTimesError, OverlappingActivitiesError} <= kinds


def test_chain_file(tmp_path, workday, home_then_exercise):
    path = tmp_path / "chains.jsonl"
    assert write_chains(path, [workday, home_then_exercise]) == 2
    assert read_chains(path) == [workday, home_then_exercise]


def test_chain_file_validates(tmp_path):
    path = tmp_path / "chains.jsonl"
    write_chains(path, [ActivityChain("a", date(2024, 1, 1), (Activity(1, 0, 120), Activity(2, 60, 180)))])
    with pytest.raises(ChainValidationError):
        read_chains(path)
    assert len(read_chains(path, validate=False)) == 1


def test_observed_mask(home_then_exercise):
    assert observed_mask(home_then_exercise) is None
    mask = np.zeros(96, dtype=bool)
    mask[:40] = True
    fragment = with_observed(home_then_exercise, mask)
    assert fragment.observed_slots == 40
    assert np.array_equal(observed_mask(fragment), mask)


def _profile(**overrides):
    uniform = np.full((15, 15), 1 / 15)
    values = dict(
        name="flat",
        start_density=np.full((15, 96), 1 / 96),
        duration_mean=np.full(15, 4.0),
        duration_std=np.full(15, 1.0),
        transitions=uniform,
        weekday_weights=np.ones(15),
        weekend_weights=np.full(15, 2.0),
    )
    values.update(overrides)
    return RegionProfile(**values)


def test_region_profile_day_weights():
    profile = _profile()
    assert profile.day_weights(0)[0] == 1.0
    assert profile.day_weights(6)[0] == 2.0
    with pytest.raises(ValueError):
        profile.start_density[0, 0] = 1.0


@pytest.mark.parametrize(
    "overrides",
    [
        {"start_density": np.full((15, 95), 1 / 95)},
        {"transitions": np.full((15, 15), 0.1)},
        {"travel_slots": (0.5, 0.2)},
        {"weekend_days": frozenset({7})},
    ],
)
def test_region_profile_rejects(overrides):
    with pytest.raises(InvalidConfigError):
        _profile(**overrides)
