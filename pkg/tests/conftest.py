from __future__ import annotations

from datetime import date

import pytest

from mobichain.activity import Activity, ActivityChain, ActivityType
from mobichain.encoding import SlotDataset, encode_chains
from mobichain.model import ModelConfig
from mobichain.simgen import build_region_profile, generate_population
from mobichain.utils import parse_hhmm


def chain_of(*activities: tuple[int, str, str], agent_id: str = "agent-1", day: date = date(2024, 1, 1),
             observed: str | None = None) -> ActivityChain:
    """ Chain from (code, "HH:MM", "HH:MM") triples. """
    return ActivityChain(
        agent_id,
        day,
        tuple(Activity(int(code), parse_hhmm(start), parse_hhmm(end)) for code, start, end in activities),
        observed,
    )


@pytest.fixture
def make_chain():
    return chain_of


@pytest.fixture
def home_then_exercise() -> ActivityChain:
    return chain_of((ActivityType.HOME, "00:00", "10:00"), (ActivityType.EXERCISE, "10:30", "11:00"))


@pytest.fixture
def workday() -> ActivityChain:
    return chain_of(
        (ActivityType.HOME, "00:00", "08:00"),
        (ActivityType.WORK, "08:30", "17:00"),
        (ActivityType.HOME, "17:30", "24:00"),
    )


@pytest.fixture(scope="session")
def tiny_config() -> ModelConfig:
    return ModelConfig(
        d_model=16,
        heads=2,
        mlp_hidden=16,
        ffn_hidden=16,
        token_embed_dim=8,
        time_embed_dim=4,
        dow_embed_dim=4,
        dropout_p=0.0,
        dtype="float64",
    )


@pytest.fixture(scope="session")
def region_a():
    return build_region_profile("region_a_us_like")


@pytest.fixture(scope="session")
def region_b():
    return build_region_profile("region_b_egypt_like")


@pytest.fixture(scope="session")
def region_a_days(region_a) -> list[ActivityChain]:
    return generate_population(region_a, agents=4, days=7, seed=11)


@pytest.fixture(scope="session")
def region_b_days(region_b) -> list[ActivityChain]:
    return generate_population(region_b, agents=4, days=7, seed=12)


@pytest.fixture
def complete_dataset(region_a_days) -> SlotDataset:
    return encode_chains(region_a_days)
