"""
Defining constants for the project.
"""
from __future__ import annotations

from pathlib import Path
from typing import Final

VERSION: Final = "0.4.0"
DOMAIN: Final = "mobichain"

ASSETS_DIR: Final = Path(__file__).parent / "assets"
PRESETS_DIR: Final = ASSETS_DIR / "presets"
TIME_SEGMENTS_FILE: Final = ASSETS_DIR / "time_segments.json"
POI_AFFINITY_FILE: Final = ASSETS_DIR / "poi_affinity.json"

"""Day grid"""
SLOT_MINUTES: Final = 15
SLOTS_PER_DAY: Final = 96
MINUTES_PER_DAY: Final = 1440
DAYS_PER_WEEK: Final = 7

"""Tokens"""
NUM_ACTIVITIES: Final = 15
TRAVEL_TOKEN: Final = 16
MASK_TOKEN: Final = 17
VOCAB_IN: Final = 17
CLASSES_OUT: Final = 16
NO_TARGET: Final = 0

"""Encoding"""
DEFAULT_TRAVEL_CAP_MINUTES: Final = 60

"""Stay points and grid"""
EARTH_RADIUS_M: Final = 6_371_008.8
DEFAULT_TIME_THRESHOLD_S: Final = 300
DEFAULT_DISTANCE_THRESHOLD_M: Final = 300.0
DEFAULT_SPEED_THRESHOLD_KMH: Final = 30.0
DEFAULT_CELL_SIZE_M: Final = 320.0
CELL_AREA_BAND_KM2: Final = (0.06378, 0.12709)
DEFAULT_POI_RADIUS_M: Final = 25.0
DEFAULT_NIGHT_HOURS: Final = (22, 6)
DEFAULT_DAY_HOURS: Final = (8, 18)
DEFAULT_MIN_WORK_DAYS: Final = 3
DEFAULT_MIN_DAYS: Final = 7
DEFAULT_MIN_OBSERVED_SLOTS: Final = 24
EDUCATION_CATEGORIES: Final = frozenset({"school", "university", "college", "kindergarten"})

"""Layer groups"""
GROUP_EMBEDDINGS: Final = "embeddings"
GROUP_BLOCK_1: Final = "block_1"
GROUP_BLOCK_2: Final = "block_2"
GROUP_BLOCK_3: Final = "block_3"
GROUP_MLP_HEAD: Final = "mlp_head"
LAYER_GROUPS: Final = (GROUP_EMBEDDINGS, GROUP_BLOCK_1, GROUP_BLOCK_2, GROUP_BLOCK_3, GROUP_MLP_HEAD)

"""Checkpoints"""
CHECKPOINT_MAGIC: Final = b"MOBICKPT"
CHECKPOINT_FORMAT_VERSION: Final = 1

"""Statistics"""
LENGTH_BINS: Final = 13
STAT_NAMES: Final = ("length", "duration", "type", "start", "end")

"""Environment"""
ENV_THREADS: Final = "MOBICHAIN_THREADS"

"""Exit codes"""
EXIT_OK: Final = 0
EXIT_VALIDATION: Final = 1
EXIT_IO: Final = 2
