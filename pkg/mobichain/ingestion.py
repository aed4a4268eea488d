"""GPS traces and POIs to fragmentary activity chains."""
from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import date, datetime, time, timedelta
from functools import lru_cache
from pathlib import Path
from zoneinfo import ZoneInfo

import numpy as np
import pandas as pd
import voluptuous as vol

from .activity import Activity, ActivityChain, ActivityType, StayPoint
from .const import (
    DEFAULT_CELL_SIZE_M,
    DEFAULT_DAY_HOURS,
    DEFAULT_DISTANCE_THRESHOLD_M,
    DEFAULT_MIN_DAYS,
    DEFAULT_MIN_OBSERVED_SLOTS,
    DEFAULT_MIN_WORK_DAYS,
    DEFAULT_NIGHT_HOURS,
    DEFAULT_POI_RADIUS_M,
    DEFAULT_SPEED_THRESHOLD_KMH,
    DEFAULT_TIME_THRESHOLD_S,
    DEFAULT_TRAVEL_CAP_MINUTES,
    EARTH_RADIUS_M,
    EDUCATION_CATEGORIES,
    MINUTES_PER_DAY,
    NUM_ACTIVITIES,
    POI_AFFINITY_FILE,
    SLOTS_PER_DAY,
)
from .encoding import round_to_slot
from .errors import (
    EmptyTraceError,
    InsufficientHistoryError,
    InvalidConfigError,
    InvalidRecordError,
    NoNearbyPoiError,
    UnsortedInputError,
)
from .simgen import build_region_profile
from .utils import haversine_m, mask_to_bits, read_jsonl, resolve_threads

_LOGGER = logging.getLogger(__name__)

GPS_COLUMNS = ("agent_id", "timestamp", "lat", "lon")

AFFINITY_TABLE_SCHEMA = vol.Schema(
    {
        vol.Required("version"): int,
        vol.Required("categories"): {
            str: {
                vol.All(vol.Coerce(int), vol.Range(min=1, max=NUM_ACTIVITIES)): vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0))
            }
        },
    }
)


@dataclass(frozen=True)
class GpsRecord:
    agent_id: str
    timestamp: int
    lat: float
    lon: float

    def __post_init__(self) -> None:
        if not -90.0 <= self.lat <= 90.0 or not -180.0 <= self.lon <= 180.0:
            raise InvalidRecordError(f"Record of {self.agent_id} at {self.timestamp} has coordinates ({self.lat}, {self.lon})")


@dataclass(frozen=True)
class Poi:
    """Point of interest; ``activity_affinity`` holds one weight per activity code 1..15."""

    id: str
    lat: float
    lon: float
    category: str
    activity_affinity: tuple[float, ...]

    def __post_init__(self) -> None:
        if not -90.0 <= self.lat <= 90.0 or not -180.0 <= self.lon <= 180.0:
            raise InvalidRecordError(f"POI {self.id} has coordinates ({self.lat}, {self.lon})")
        if len(self.activity_affinity) != NUM_ACTIVITIES or abs(sum(self.activity_affinity) - 1.0) > 1e-9:
            raise InvalidRecordError(f"POI {self.id}: affinity must hold {NUM_ACTIVITIES} weights summing to 1")


@dataclass(frozen=True)
class StayConfig:
    time_threshold_s: float = DEFAULT_TIME_THRESHOLD_S
    distance_threshold_m: float = DEFAULT_DISTANCE_THRESHOLD_M
    speed_threshold_kmh: float = DEFAULT_SPEED_THRESHOLD_KMH


@dataclass(frozen=True)
class GridConfig:
    """
    Flat square grid on an equirectangular projection centred on ``reference_lat``.

    Without a reference latitude the grid is centred on the equator; :func:`ingest_traces`
    anchors it on the median latitude of the records first.
    """

    cell_size_m: float = DEFAULT_CELL_SIZE_M
    reference_lat: float | None = None

    def __post_init__(self) -> None:
        if self.cell_size_m <= 0:
            raise InvalidConfigError("Grid cell size must be positive")

    @property
    def cell_area_km2(self) -> float:
        return (self.cell_size_m / 1000.0) ** 2

    def cell_index(self, lat, lon) -> tuple[np.ndarray, np.ndarray]:
        lat = np.asarray(lat, dtype=np.float64)
        lon = np.asarray(lon, dtype=np.float64)
        x = EARTH_RADIUS_M * np.radians(lon) * math.cos(math.radians(self.reference_lat or 0.0))
        y = EARTH_RADIUS_M * np.radians(lat)
        return np.floor(x / self.cell_size_m).astype(np.int64), np.floor(y / self.cell_size_m).astype(np.int64)

    def cell_id(self, lat: float, lon: float) -> str:
        ix, iy = self.cell_index(lat, lon)
        return f"{int(ix)}:{int(iy)}"

    def anchored(self, lats: Iterable[float]) -> GridConfig:
        """ This grid centred on the median of ``lats``, unless a reference latitude is already set. """
        if self.reference_lat is not None:
            return self
        return replace(self, reference_lat=float(np.median(np.fromiter(lats, dtype=np.float64))))


@dataclass(frozen=True)
class MandatoryConfig:
    night_hours: tuple[int, int] = DEFAULT_NIGHT_HOURS
    day_hours: tuple[int, int] = DEFAULT_DAY_HOURS
    workdays: tuple[int, ...] = (0, 1, 2, 3, 4)
    min_work_days: int = DEFAULT_MIN_WORK_DAYS
    education_categories: frozenset[str] = EDUCATION_CATEGORIES


@dataclass(frozen=True)
class AnnotationConfig:
    radius_m: float = DEFAULT_POI_RADIUS_M
    time_profile_preset: str = "region_a_us_like"


@dataclass(frozen=True)
class FilterConfig:
    min_days: int = DEFAULT_MIN_DAYS
    min_observed_slots: int = DEFAULT_MIN_OBSERVED_SLOTS


@dataclass(frozen=True)
class IngestConfig:
    stay: StayConfig = field(default_factory=StayConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    mandatory: MandatoryConfig = field(default_factory=MandatoryConfig)
    annotation: AnnotationConfig = field(default_factory=AnnotationConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    timezone: str = "UTC"
    travel_cap_minutes: int = DEFAULT_TRAVEL_CAP_MINUTES

    @property
    def tz(self) -> ZoneInfo:
        return ZoneInfo(self.timezone)


def read_gps_csv(path: str | Path) -> list[GpsRecord]:
    """
    Read a GPS CSV with header ``agent_id,timestamp,lat,lon``.

    Row order is preserved so unsorted agents are reported downstream.
    """
    frame = pd.read_csv(path, dtype={"agent_id": str})
    missing = [column for column in GPS_COLUMNS if column not in frame.columns]
    if missing:
        raise InvalidRecordError(f"{path}: missing GPS columns {missing}")
    records = [
        GpsRecord(agent, int(ts), float(lat), float(lon))
        for agent, ts, lat, lon in frame.loc[:, list(GPS_COLUMNS)].itertuples(index=False, name=None)
    ]
    _LOGGER.info("Loaded %d GPS records for %d agents from %s", len(records), frame["agent_id"].nunique(), path)
    return records


def load_affinity_table(path: str | Path = POI_AFFINITY_FILE) -> dict[str, tuple[float, ...]]:
    """
    Load the category to activity affinity table.

    Returns:
        Map category -> 15 weights indexed by ``code - 1``

    Raises:
        InvalidConfigError: If the table is malformed or a row does not sum to 1
    """
    try:
        with open(path, encoding="utf-8") as handle:
            raw = AFFINITY_TABLE_SCHEMA(json.load(handle))
    except vol.Invalid as err:
        raise InvalidConfigError(f"Invalid affinity table {path}: {err}") from err

    table: dict[str, tuple[float, ...]] = {}
    for category, weights in raw["categories"].items():
        row = [0.0] * NUM_ACTIVITIES
        for code, weight in weights.items():
            row[code - 1] = weight
        if abs(sum(row) - 1.0) > 1e-9:
            raise InvalidConfigError(f"Affinity table {path}: weights of {category!r} sum to {sum(row)}")
        table[category] = tuple(row)
    return table


@lru_cache(maxsize=1)
def default_affinity_table() -> dict[str, tuple[float, ...]]:
    return load_affinity_table(POI_AFFINITY_FILE)


def make_poi(poi_id: str, lat: float, lon: float, category: str, affinity: Mapping[str, tuple[float, ...]] | None = None) -> Poi:
    affinity = default_affinity_table() if affinity is None else affinity
    if category not in affinity:
        raise InvalidRecordError(f"POI {poi_id}: unknown category {category!r}")
    return Poi(str(poi_id), float(lat), float(lon), category, affinity[category])


def read_pois(path: str | Path, affinity: Mapping[str, tuple[float, ...]] | None = None) -> list[Poi]:
    """ Loads POI JSONL records ``{"id", "lat", "lon", "category"}``. """
    try:
        pois = [make_poi(r["id"], r["lat"], r["lon"], r["category"], affinity) for r in read_jsonl(path)]
    except KeyError as err:
        raise InvalidRecordError(f"{path}: POI record lacks {err}") from err
    _LOGGER.info("Loaded %d POIs from %s", len(pois), path)
    return pois


class PoiIndex:
    """POIs bucketed by grid cell for radius queries."""

    def __init__(self, pois: Iterable[Poi], grid: GridConfig | None = None) -> None:
        self._grid = grid or GridConfig()
        self._buckets: dict[tuple[int, int], list[Poi]] = defaultdict(list)
        self._count = 0
        for poi in pois:
            ix, iy = self._grid.cell_index(poi.lat, poi.lon)
            self._buckets[(int(ix), int(iy))].append(poi)
            self._count += 1

    def __len__(self) -> int:
        return self._count

    def nearby(self, lat: float, lon: float, radius_m: float) -> list[tuple[Poi, float]]:
        """ POIs within ``radius_m`` of a point with their distances, nearest first. """
        ix, iy = self._grid.cell_index(lat, lon)
        rings = max(1, math.ceil(radius_m / self._grid.cell_size_m))
        found: list[tuple[Poi, float]] = []
        for dx in range(-rings, rings + 1):
            for dy in range(-rings, rings + 1):
                for poi in self._buckets.get((int(ix) + dx, int(iy) + dy), ()):
                    distance = haversine_m(lat, lon, poi.lat, poi.lon)
                    if distance <= radius_m:
                        found.append((poi, distance))
        found.sort(key=lambda item: (item[1], item[0].id))
        return found

    def regions_with(self, categories: Iterable[str]) -> frozenset[str]:
        """ Region ids of cells holding at least one POI of the given categories. """
        wanted = frozenset(categories)
        return frozenset(
            f"{ix}:{iy}" for (ix, iy), pois in self._buckets.items() if any(p.category in wanted for p in pois)
        )


def _group_by_agent(records: Iterable[GpsRecord]) -> dict[str, list[GpsRecord]]:
    grouped: dict[str, list[GpsRecord]] = defaultdict(list)
    for record in records:
        grouped[record.agent_id].append(record)
    return grouped


def _agent_stays(agent_id: str, records: Sequence[GpsRecord], cfg: StayConfig, grid: GridConfig) -> list[StayPoint]:
    if len(records) < 2:
        return []
    ts = np.array([r.timestamp for r in records], dtype=np.int64)
    lat = np.array([r.lat for r in records])
    lon = np.array([r.lon for r in records])

    gap = np.diff(ts).astype(np.float64)
    if np.any(gap < 0):
        first_bad = int(np.flatnonzero(gap < 0)[0]) + 1
        raise UnsortedInputError(f"Agent {agent_id}: record {first_bad} at {ts[first_bad]} precedes {ts[first_bad - 1]}")
    distance = np.atleast_1d(haversine_m(lat[:-1], lon[:-1], lat[1:], lon[1:]))
    with np.errstate(divide="ignore", invalid="ignore"):
        speed_kmh = np.where(gap > 0, distance / gap * 3.6, np.where(distance > 0, np.inf, 0.0))

    candidate = (gap >= cfg.time_threshold_s) | (distance >= cfg.distance_threshold_m)
    retained = candidate & (speed_kmh < cfg.speed_threshold_kmh)
    ix, iy = grid.cell_index(lat, lon)

    # pair k covers records k and k + 1; consecutive retained pairs in one cell form a stay
    runs: list[tuple[int, int]] = []
    for k in np.flatnonzero(retained):
        k = int(k)
        if runs and runs[-1][1] == k - 1 and (ix[k + 1], iy[k + 1]) == (ix[runs[-1][0] + 1], iy[runs[-1][0] + 1]):
            runs[-1] = (runs[-1][0], k)
        else:
            runs.append((k, k))

    stays = []
    for first, last in runs:
        arrive, depart = int(ts[first]), int(ts[last + 1])
        if depart <= arrive:
            continue
        kept = slice(first + 1, last + 2)
        stays.append(StayPoint(
            agent_id=agent_id,
            arrive=arrive,
            depart=depart,
            centroid=(float(lat[kept].mean()), float(lon[kept].mean())),
            records=last + 1 - first,
        ))
    return stays


def extract_stay_points(
    records: Sequence[GpsRecord],
    cfg: StayConfig | None = None,
    grid: GridConfig | None = None,
) -> list[StayPoint]:
    """
    Detect stays in GPS traces.

    A record following a gap of at least ``time_threshold_s`` or a jump of at
    least ``distance_threshold_m`` is a stay candidate; it is kept when the
    implied speed stays under ``speed_threshold_kmh``. Consecutive kept records
    in one grid cell merge into a single stay spanning from the record before
    the first to the last; its centroid is the mean of the kept records.

    Args:
        records: GPS records; each agent's records must be in timestamp order
        cfg: Thresholds
        grid: Grid used to decide whether kept records share a place

    Returns:
        Stays of all agents, per agent in time order

    Raises:
        EmptyTraceError: If no record is given
        UnsortedInputError: If an agent's timestamps decrease
    """
    if not records:
        raise EmptyTraceError("No GPS records supplied")
    cfg = cfg or StayConfig()
    grid = grid or GridConfig()
    stays: list[StayPoint] = []
    for agent_id, agent_records in _group_by_agent(records).items():
        stays.extend(_agent_stays(agent_id, agent_records, cfg, grid))
    return stays


def cluster_stay_regions(stays: Iterable[StayPoint], grid: GridConfig | None = None) -> list[StayPoint]:
    grid = grid or GridConfig()
    return [replace(stay, region_id=grid.cell_id(*stay.centroid)) for stay in stays]


def _window_bounds(day: date, hours: tuple[int, int], tz: ZoneInfo) -> tuple[datetime, datetime]:
    start_hour, end_hour = hours
    start = datetime.combine(day, time(start_hour), tzinfo=tz)
    end_day = day + timedelta(days=1) if end_hour <= start_hour else day
    return start, datetime.combine(end_day, time(end_hour % 24), tzinfo=tz)


def _window_days(stay: StayPoint, hours: tuple[int, int], tz: ZoneInfo) -> set[date]:
    """ Window start dates whose [start, end) hours overlap the stay in local time. """
    arrive = datetime.fromtimestamp(stay.arrive, tz)
    depart = datetime.fromtimestamp(stay.depart, tz)
    days = set()
    day = arrive.date() - timedelta(days=1)
    while day <= depart.date():
        start, end = _window_bounds(day, hours, tz)
        if arrive < end and depart > start:
            days.add(day)
        day += timedelta(days=1)
    return days


def _most_visited(visits: Mapping[str, set[date]], minimum: int = 1, exclude: Iterable[str] = ()) -> str | None:
    excluded = set(exclude)
    ranked = sorted(
        ((len(days), region) for region, days in visits.items() if region not in excluded and len(days) >= minimum),
        key=lambda item: (-item[0], item[1]),
    )
    return ranked[0][1] if ranked else None


def infer_mandatory_activities(
    stays: Iterable[StayPoint],
    cfg: MandatoryConfig | None = None,
    tz: ZoneInfo | str = "UTC",
    education_regions: Iterable[str] = (),
) -> dict[str, ActivityType]:
    """
    Label an agent's HOME, WORK and SCHOOL regions from visit frequencies.

    HOME is the region seen on most distinct nights. WORK is the non-home,
    non-education region seen on most distinct workday daytimes, with at least
    ``min_work_days`` of them; SCHOOL applies the same rule to education
    regions. Ties go to the lexicographically lower region id.

    Args:
        stays: One agent's clustered stays
        cfg: Night/day windows and thresholds
        tz: Local time zone of the agent
        education_regions: Region ids holding education POIs

    Returns:
        Map region_id -> mandatory activity

    Raises:
        InsufficientHistoryError: If no stay overlaps night hours
    """
    cfg = cfg or MandatoryConfig()
    tz = ZoneInfo(tz) if isinstance(tz, str) else tz
    education = set(education_regions)

    night_visits: dict[str, set[date]] = defaultdict(set)
    day_visits: dict[str, set[date]] = defaultdict(set)
    for stay in stays:
        if stay.region_id is None:
            continue
        night_visits[stay.region_id] |= _window_days(stay, cfg.night_hours, tz)
        day_visits[stay.region_id] |= {d for d in _window_days(stay, cfg.day_hours, tz) if d.weekday() in cfg.workdays}

    home = _most_visited(night_visits)
    if home is None:
        raise InsufficientHistoryError("No stay overlaps night hours; HOME cannot be inferred")
    labels = {home: ActivityType.HOME}

    work = _most_visited(
        {r: d for r, d in day_visits.items() if r not in education}, cfg.min_work_days, exclude=[home])
    if work is not None:
        labels[work] = ActivityType.WORK
    school = _most_visited(
        {r: d for r, d in day_visits.items() if r in education}, cfg.min_work_days, exclude=labels)
    if school is not None:
        labels[school] = ActivityType.SCHOOL
    return labels


@dataclass(frozen=True)
class AnnotationQuery:
    stay: StayPoint
    candidate_pois: tuple[Poi, ...]
    distances: tuple[float, ...]
    start_slot: int

    def __post_init__(self) -> None:
        if len(self.candidate_pois) != len(self.distances):
            raise ValueError("Each candidate POI needs a distance")
        if not 0 <= self.start_slot < SLOTS_PER_DAY:
            raise ValueError(f"Start slot {self.start_slot} outside 0..{SLOTS_PER_DAY - 1}")


def local_minutes(timestamp: int, tz: ZoneInfo) -> int:
    local = datetime.fromtimestamp(timestamp, tz)
    return local.hour * 60 + local.minute


def build_annotation_query(
    stay: StayPoint,
    poi_index: PoiIndex,
    radius_m: float = DEFAULT_POI_RADIUS_M,
    tz: ZoneInfo | str = "UTC",
) -> AnnotationQuery:
    tz = ZoneInfo(tz) if isinstance(tz, str) else tz
    nearby = poi_index.nearby(stay.centroid[0], stay.centroid[1], radius_m)
    start_slot = min(round_to_slot(local_minutes(stay.arrive, tz)), SLOTS_PER_DAY - 1)
    return AnnotationQuery(
        stay=stay,
        candidate_pois=tuple(poi for poi, _ in nearby),
        distances=tuple(float(d) for _, d in nearby),
        start_slot=start_slot,
    )


def score_activities(query: AnnotationQuery, time_profiles: np.ndarray) -> np.ndarray:
    """
    Posterior-style score per activity code of a stay.

    score(T) = sum_j affinity(POI_j, T) * time_profile(T, start slot) * prior(POI_j),
    with prior(POI_j) proportional to 1 / (1 + distance_j).

    Raises:
        NoNearbyPoiError: If the query has no candidate POI
    """
    if not query.candidate_pois:
        raise NoNearbyPoiError(f"No POI near stay of {query.stay.agent_id} at {query.stay.centroid}")
    priors = 1.0 / (1.0 + np.asarray(query.distances, dtype=np.float64))
    priors /= priors.sum()
    affinity = np.array([poi.activity_affinity for poi in query.candidate_pois], dtype=np.float64)
    return (priors @ affinity) * np.asarray(time_profiles)[:, query.start_slot]


def annotate_nonmandatory(query: AnnotationQuery, time_profiles: np.ndarray | None = None) -> ActivityType:
    """ Most likely activity of a stay; "Something else" when no POI is near or nothing scores. """
    if time_profiles is None:
        time_profiles = default_time_profiles()
    try:
        scores = score_activities(query, time_profiles)
    except NoNearbyPoiError as err:
        _LOGGER.debug("%s", err)
        return ActivityType.OTHER
    if scores.max() <= 0:
        return ActivityType.OTHER
    return ActivityType(int(np.argmax(scores)) + 1)


@lru_cache(maxsize=4)
def default_time_profiles(preset: str = "region_a_us_like") -> np.ndarray:
    """ Per-activity start-slot densities of a shipped region preset. """
    return build_region_profile(preset).start_density


def _day_pieces(stay: StayPoint, tz: ZoneInfo) -> Iterable[tuple[date, int, int]]:
    cursor = datetime.fromtimestamp(stay.arrive, tz)
    end = datetime.fromtimestamp(stay.depart, tz)
    while cursor < end:
        day = cursor.date()
        midnight = datetime.combine(day, time(), tzinfo=tz)
        piece_end = min(end, datetime.combine(day + timedelta(days=1), time(), tzinfo=tz))
        start_min = int(math.floor((cursor - midnight).total_seconds() / 60.0))
        end_min = min(int(math.ceil((piece_end - midnight).total_seconds() / 60.0)), MINUTES_PER_DAY)
        if end_min > start_min:
            yield day, start_min, end_min
        cursor = piece_end


def build_activity_chains(
    stays: Iterable[StayPoint],
    tz: ZoneInfo | str = "UTC",
    travel_cap_minutes: int = DEFAULT_TRAVEL_CAP_MINUTES,
) -> list[ActivityChain]:
    """
    Assemble labelled stays into one fragmentary chain per agent and local day.

    Stays crossing midnight are split. Slots covered by a stay, or by a gap of
    at most ``travel_cap_minutes`` between two stays of the day, are marked
    observed; everything else stays unobserved.
    """
    tz = ZoneInfo(tz) if isinstance(tz, str) else tz
    per_day: dict[tuple[str, date], list[Activity]] = defaultdict(list)
    for stay in sorted(stays, key=lambda s: (s.agent_id, s.arrive)):
        if stay.activity is None:
            continue
        for day, start, end in _day_pieces(stay, tz):
            per_day[(stay.agent_id, day)].append(Activity(int(stay.activity), start, end))

    chains = []
    for (agent_id, day), pieces in sorted(per_day.items()):
        activities: list[Activity] = []
        for piece in sorted(pieces, key=lambda a: a.start):
            start = max(piece.start, activities[-1].end) if activities else piece.start
            if start < piece.end:
                activities.append(Activity(piece.type, start, piece.end))
        if not activities:
            continue

        mask = np.zeros(SLOTS_PER_DAY, dtype=bool)
        for index, activity in enumerate(activities):
            mask[round_to_slot(activity.start):round_to_slot(activity.end)] = True
            if index and activity.start - activities[index - 1].end <= travel_cap_minutes:
                mask[round_to_slot(activities[index - 1].end):round_to_slot(activity.start)] = True
        chains.append(ActivityChain(agent_id, day, tuple(activities), mask_to_bits(mask)))
    return chains


def filter_agents(chains: Iterable[ActivityChain], cfg: FilterConfig | None = None) -> list[ActivityChain]:
    """
    Drop thinly observed days, then agents left with too few days.

    Days need at least ``min_observed_slots`` observed slots (complete days
    count as fully observed); agents need ``min_days`` distinct kept days.
    """
    cfg = cfg or FilterConfig()
    chains = list(chains)
    kept_days = [
        c for c in chains
        if (SLOTS_PER_DAY if c.observed is None else c.observed.count("1")) >= cfg.min_observed_slots
    ]
    days_per_agent: dict[str, set[date]] = defaultdict(set)
    for chain in kept_days:
        days_per_agent[chain.agent_id].add(chain.date)
    kept = [c for c in kept_days if len(days_per_agent[c.agent_id]) >= cfg.min_days]
    _LOGGER.info(
        "Filter kept %d of %d days (%d agents of %d)",
        len(kept), len(chains), len({c.agent_id for c in kept}), len({c.agent_id for c in chains}),
    )
    return kept


@dataclass
class IngestResult:
    chains: list[ActivityChain]
    stays: list[StayPoint]
    unfiltered_days: int = 0
    skipped_agents: list[str] = field(default_factory=list)


def ingest_traces(
    records: Sequence[GpsRecord],
    pois: Sequence[Poi],
    cfg: IngestConfig | None = None,
    threads: int | None = None,
) -> IngestResult:
    """
    Run the whole GPS to chains pipeline, in parallel per agent.

    Agents without night observations cannot be anchored to a HOME region and
    are skipped with a warning.
    """
    cfg = cfg or IngestConfig()
    if not records:
        raise EmptyTraceError("No GPS records supplied")
    tz = cfg.tz
    grid = cfg.grid.anchored(record.lat for record in records)
    _LOGGER.debug("Grid centred on latitude %.5f", grid.reference_lat)
    poi_index = PoiIndex(pois, grid)
    education = poi_index.regions_with(cfg.mandatory.education_categories)
    time_profiles = default_time_profiles(cfg.annotation.time_profile_preset)

    def process(item: tuple[str, list[GpsRecord]]) -> tuple[str, list[StayPoint] | None]:
        agent_id, agent_records = item
        stays = cluster_stay_regions(_agent_stays(agent_id, agent_records, cfg.stay, grid), grid)
        try:
            mandatory = infer_mandatory_activities(stays, cfg.mandatory, tz, education)
        except InsufficientHistoryError:
            _LOGGER.warning("Skipping agent %s: no night-time stays", agent_id)
            return agent_id, None
        labelled = []
        for stay in stays:
            activity = mandatory.get(stay.region_id)
            if activity is None:
                query = build_annotation_query(stay, poi_index, cfg.annotation.radius_m, tz)
                activity = annotate_nonmandatory(query, time_profiles)
            labelled.append(replace(stay, activity=int(activity)))
        return agent_id, labelled

    agents = list(_group_by_agent(records).items())
    threads = resolve_threads(threads)
    if threads > 1 and len(agents) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(process, agents))
    else:
        results = [process(item) for item in agents]

    stays = [stay for _, labelled in results if labelled for stay in labelled]
    skipped = [agent_id for agent_id, labelled in results if labelled is None]
    chains = build_activity_chains(stays, tz, cfg.travel_cap_minutes)
    kept = filter_agents(chains, cfg.filter)
    _LOGGER.info("Ingested %d stays into %d chains (%d after filtering)", len(stays), len(chains), len(kept))
    return IngestResult(chains=kept, stays=stays, unfiltered_days=len(chains), skipped_agents=skipped)
