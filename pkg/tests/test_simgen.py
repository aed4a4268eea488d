from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobichain.activity import ActivityType, check_chain
from mobichain.encoding import encode_day
from mobichain.errors import InvalidConfigError, UnknownPresetError
from mobichain.metrics import extract_statistics, jsd
from mobichain.simgen import (
    DegradationConfig,
    available_presets,
    build_region_profile,
    degrade_observation,
    degrade_population,
    generate_population,
    mixture_density,
    sample_complete_day,
)
from mobichain.utils import bits_to_mask


def test_shipped_presets():
    assert available_presets() == ["region_a_us_like", "region_b_egypt_like"]
    assert build_region_profile("Region_A_US_Like").name == "region_a_us_like"


def test_unknown_preset():
    with pytest.raises(UnknownPresetError):
        build_region_profile("atlantis")


def test_preset_needs_every_activity(tmp_path):
    path = tmp_path / "partial.json"
    path.write_text(json.dumps({
        "name": "partial",
        "first_departure": [[8.0, 1.0, 1.0]],
        "activities": {"1": {"start": [[12.0, 1.0, 1.0]], "duration": [4, 1]}},
    }))
    with pytest.raises(InvalidConfigError, match="lacks activities"):
        build_region_profile(path)


def test_malformed_preset():
    with pytest.raises(InvalidConfigError):
        build_region_profile({"name": "bad", "first_departure": [[8.0, -1.0, 1.0]], "activities": {}})


def test_mixture_density_wraps_midnight():
    density = mixture_density([[23.9, 1.0, 1.0]])
    assert density.sum() == pytest.approx(1.0)
    assert density[0] > density[90] > density[48]
    assert density[0] > 1e3 * density[48]


def test_region_a_work_peaks_in_the_morning(region_a):
    work = region_a.start_density[ActivityType.WORK - 1]
    assert 28 <= int(np.argmax(work)) <= 36


def test_region_b_religious_visits_are_bimodal(region_b):
    religious = region_b.start_density[ActivityType.RELIGIOUS - 1]
    midday = religious[46:55].max()
    assert religious[16:25].max() > 2 * midday
    assert religious[70:79].max() > 2 * midday
    assert region_b.weekend_days == {4, 5}
    assert region_b.day_weights(4) is region_b.weekend_weights


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1), st.integers(0, 6), st.sampled_from(["region_a_us_like", "region_b_egypt_like"]))
def test_sampled_days_are_complete(seed, day_of_week, preset):
    profile = build_region_profile(preset)
    chain = sample_complete_day(profile, day_of_week, np.random.default_rng(seed))
    assert check_chain(chain) == []
    first, last = chain.activities[0], chain.activities[-1]
    assert (first.type, first.start) == (ActivityType.HOME, 0)
    assert (last.type, last.end) == (ActivityType.HOME, 1440)
    for before, after in zip(chain.activities, chain.activities[1:]):
        assert 15 <= after.start - before.end <= 60
    assert encode_day(chain).is_complete
    assert chain.day_of_week == day_of_week


def test_population_is_reproducible(region_a):
    single = generate_population(region_a, agents=5, days=3, seed=8, threads=1)
    pooled = generate_population(region_a, agents=5, days=3, seed=8, threads=3)
    assert single == pooled
    assert len(single) == 15
    assert single[0].agent_id == "region_a_us_like-00000"
    assert [c.date.isoformat() for c in single[:3]] == ["2024-01-01", "2024-01-02", "2024-01-03"]
    assert generate_population(region_a, agents=5, days=3, seed=9) != single


def test_regions_differ(region_a_days, region_b_days):
    religious = ActivityType.RELIGIOUS - 1
    a = extract_statistics(region_a_days)["type"].probabilities
    b = extract_statistics(region_b_days)["type"].probabilities
    assert b[religious] > a[religious]


@pytest.mark.parametrize(
    "kwargs", [{"coverage_mean": 0.0}, {"coverage_mean": 1.2}, {"windows_mean": -1.0}, {"coverage_concentration": 0.0}],
)
def test_degradation_config_rejects(kwargs):
    with pytest.raises(InvalidConfigError):
        DegradationConfig(**kwargs)


def test_share_above_edges():
    assert DegradationConfig(coverage_mean=1.0).share_above() == 1.0
    assert DegradationConfig(windows_mean=0.0).share_above() == 0.0
    assert 0.0 < DegradationConfig().share_above() < 1.0


def test_full_coverage_keeps_the_chain(workday):
    assert degrade_observation(workday, DegradationConfig(coverage_mean=1.0), np.random.default_rng(0)) is workday


def test_no_windows_observe_nothing(workday):
    degraded = degrade_observation(workday, DegradationConfig(windows_mean=0.0), np.random.default_rng(0))
    assert degraded.activities == ()
    assert degraded.observed == "0" * 96


def test_degraded_coverage_statistics(workday):
    cfg = DegradationConfig(coverage_mean=0.3)
    degraded = [degrade_observation(workday, cfg, np.random.default_rng(seed)) for seed in range(3000)]
    coverage = np.array([d.observed.count("1") for d in degraded])
    assert coverage.mean() / 96 == pytest.approx(0.3, abs=0.03)
    assert (coverage >= 24).mean() == pytest.approx(cfg.share_above(24), abs=0.03)


def test_degradation_only_keeps_evidence(region_b_days):
    degraded = degrade_population(region_b_days, DegradationConfig(coverage_mean=0.4, windows_mean=3.0), seed=2)
    assert degraded == degrade_population(region_b_days, DegradationConfig(coverage_mean=0.4, windows_mean=3.0), seed=2)
    for truth, fragment in zip(region_b_days, degraded):
        assert check_chain(fragment) == []
        mask = bits_to_mask(fragment.observed)
        for piece in fragment.activities:
            assert mask[piece.start // 15:(piece.end + 14) // 15].all()
            assert any(
                a.type == piece.type and a.start <= piece.start and piece.end <= a.end for a in truth.activities
            )


@pytest.mark.slow
def test_large_populations_reproduce_type_marginals(region_a):
    first = generate_population(region_a, agents=1000, days=10, seed=1)
    second = generate_population(region_a, agents=1000, days=10, seed=2)
    a = extract_statistics(first)
    b = extract_statistics(second)
    assert jsd(a["type"].probabilities, b["type"].probabilities) < 0.01
    assert jsd(a["start"].probabilities, b["start"].probabilities) < 0.01
