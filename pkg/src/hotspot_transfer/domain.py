"""Calendar arithmetic, spatial identifiers, and the validated city dataset.

Dates are plain :class:`datetime.date` values (proleptic Gregorian, totally
ordered, leap-aware), so no calendar code is reimplemented here. Coordinates
are planar meters supplied by the data producer; distance is only ever used
for neighbor ranking.
"""

from __future__ import annotations

import calendar
import statistics
from dataclasses import dataclass, field
from datetime import date, timedelta

from .errors import WindowOutOfRange

PROPERTY = "property"
VIOLENT = "violent"
CRIME_CLASSES = (PROPERTY, VIOLENT)

#: Default mapping from incident category to crime class.
DEFAULT_CRIME_CLASS_MAP: dict[str, str] = {
    "arson": PROPERTY,
    "burglary": PROPERTY,
    "larceny-theft": PROPERTY,
    "motor vehicle theft": PROPERTY,
    "aggravated assault": VIOLENT,
    "forcible rape": VIOLENT,
    "murder": VIOLENT,
    "robbery": VIOLENT,
}


def day_of_week(d: date) -> int:
    """Weekday index of ``d``: 0 = Monday ... 6 = Sunday."""
    return d.weekday()


def month_bounds(year: int, month: int) -> tuple[date, date]:
    """First and last day of a calendar month."""
    last = calendar.monthrange(year, month)[1]
    return date(year, month, 1), date(year, month, last)


def add_months(year: int, month: int, delta: int) -> tuple[int, int]:
    """Shift a (year, month) pair by ``delta`` months."""
    idx = year * 12 + (month - 1) + delta
    return idx // 12, idx % 12 + 1


def months_back_window(
    test_month: tuple[int, int],
    k: int,
    period: tuple[date, date] | None = None,
) -> tuple[date, date]:
    """Date range covering the ``k`` calendar months before ``test_month``.

    Returns ``(start, end)`` where ``start`` is the first day of the month
    ``k`` months before the test month and ``end`` is the last day of the
    month immediately preceding it. When ``period`` is given, raises
    :class:`WindowOutOfRange` if the window is not fully inside it.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    year, month = test_month
    start = date(*add_months(year, month, -k), 1)
    end = date(year, month, 1) - timedelta(days=1)
    if period is not None and (start < period[0] or end > period[1]):
        raise WindowOutOfRange(
            f"window {start}..{end} outside study period {period[0]}..{period[1]}"
        )
    return start, end


@dataclass(frozen=True)
class RegionRef:
    """Either a tract inside the study city or an external (state, county).

    Exactly one of the two forms is populated; use :meth:`in_city` /
    :meth:`external` to construct.
    """

    tract_id: str | None = None
    state: str | None = None
    county: str | None = None

    def __post_init__(self):
        if self.tract_id is not None:
            if self.state is not None or self.county is not None:
                raise ValueError("in-city ref cannot carry state/county")
        else:
            if not self.state or not self.county:
                raise ValueError("external ref needs non-empty state and county")

    @classmethod
    def in_city(cls, tract_id: str) -> "RegionRef":
        return cls(tract_id=tract_id)

    @classmethod
    def external(cls, state: str, county: str) -> "RegionRef":
        return cls(state=state, county=county)

    @property
    def is_in_city(self) -> bool:
        return self.tract_id is not None


@dataclass(frozen=True)
class Tract:
    id: str
    centroid_x: float
    centroid_y: float

    def __post_init__(self):
        if not (_finite(self.centroid_x) and _finite(self.centroid_y)):
            raise ValueError(f"tract {self.id!r} has non-finite coordinates")


@dataclass(frozen=True)
class CrimeEvent:
    date: date
    tract_id: str
    category: str


@dataclass(frozen=True)
class ODFlowRecord:
    date: date
    origin: RegionRef
    dest: RegionRef
    volume: float

    def __post_init__(self):
        if not self.origin.is_in_city and not self.dest.is_in_city:
            raise ValueError("at least one endpoint must be in-city")
        if not _finite(self.volume) or self.volume < 0:
            raise ValueError(f"volume must be finite and >= 0, got {self.volume}")


@dataclass(frozen=True)
class CityDataset:
    """Immutable container for one city's tracts, crimes, and OD flows."""

    city_name: str
    tracts: tuple[Tract, ...]
    crimes: tuple[CrimeEvent, ...]
    od_flows: tuple[ODFlowRecord, ...]
    period: tuple[date, date]
    crime_class_map: dict[str, str] = field(
        default_factory=lambda: dict(DEFAULT_CRIME_CLASS_MAP)
    )

    def __post_init__(self):
        object.__setattr__(self, "tracts", tuple(self.tracts))
        object.__setattr__(self, "crimes", tuple(self.crimes))
        object.__setattr__(self, "od_flows", tuple(self.od_flows))
        ids = [t.id for t in self.tracts]
        if len(set(ids)) != len(ids):
            raise ValueError("tract ids must be unique within a city")
        if len(ids) < 9:
            raise ValueError("need at least 9 tracts (target plus 8 neighbors)")
        if self.period[0] > self.period[1]:
            raise ValueError("period start after period end")
        bad = set(self.crime_class_map.values()) - set(CRIME_CLASSES)
        if bad:
            raise ValueError(f"unknown crime classes in map: {sorted(bad)}")

    @property
    def tract_ids(self) -> tuple[str, ...]:
        return tuple(t.id for t in self.tracts)

    @property
    def n_days(self) -> int:
        return (self.period[1] - self.period[0]).days + 1

    def day_index(self, d: date) -> int:
        """Offset of ``d`` from the first study day (may fall outside 0..n_days-1)."""
        return (d - self.period[0]).days

    def months(self) -> list[tuple[int, int]]:
        """All (year, month) pairs intersecting the study period, in order."""
        out = []
        y, m = self.period[0].year, self.period[0].month
        while (y, m) <= (self.period[1].year, self.period[1].month):
            out.append((y, m))
            y, m = add_months(y, m, 1)
        return out

    def full_months(self) -> list[tuple[int, int]]:
        """Months whose every calendar day lies inside the study period."""
        return [
            (y, m)
            for (y, m) in self.months()
            if month_bounds(y, m)[0] >= self.period[0]
            and month_bounds(y, m)[1] <= self.period[1]
        ]


@dataclass(frozen=True)
class FlowSummary:
    """Mean/sd across tracts of each tract's daily-average flow volume."""

    in_city_mean: float
    in_city_sd: float
    out_city_mean: float
    out_city_sd: float


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...]
    #: crime class -> (year, month) -> percent of tracts with >= 1 incident
    monthly_hotspot_density: dict[str, dict[tuple[int, int], float]]
    flow_summary: FlowSummary

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_dataset(ds: CityDataset) -> ValidationReport:
    """Check referential integrity and summarize crime density and flow volume.

    Violations (unknown tract ids, out-of-period dates, negative volumes) are
    reported, never raised. Density is the percent of tracts with at least
    one incident of the class in the month. Flow volume is summed over both
    directions per tract per day (a record counts toward each in-city
    endpoint once), averaged over days, then summarized across tracts.
    """
    known = set(ds.tract_ids)
    violations: list[str] = []

    for ev in ds.crimes:
        if ev.tract_id not in known:
            violations.append(f"crime {ev.date} references unknown tract {ev.tract_id!r}")
        if not (ds.period[0] <= ev.date <= ds.period[1]):
            violations.append(f"crime on {ev.date} outside study period")
        if ev.category not in ds.crime_class_map:
            violations.append(f"crime category {ev.category!r} missing from class map")

    for rec in ds.od_flows:
        for ref in (rec.origin, rec.dest):
            if ref.is_in_city and ref.tract_id not in known:
                violations.append(
                    f"od record {rec.date} references unknown tract {ref.tract_id!r}"
                )
        if not (ds.period[0] <= rec.date <= ds.period[1]):
            violations.append(f"od record on {rec.date} outside study period")
        if rec.volume < 0:
            violations.append(f"od record on {rec.date} has negative volume")

    density = {cls: {} for cls in CRIME_CLASSES}
    months = ds.months()
    hit: dict[str, dict[tuple[int, int], set[str]]] = {
        cls: {m: set() for m in months} for cls in CRIME_CLASSES
    }
    for ev in ds.crimes:
        cls = ds.crime_class_map.get(ev.category)
        key = (ev.date.year, ev.date.month)
        if cls is not None and ev.tract_id in known and key in hit[cls]:
            hit[cls][key].add(ev.tract_id)
    n = len(ds.tracts)
    for cls in CRIME_CLASSES:
        for m in months:
            density[cls][m] = 100.0 * len(hit[cls][m]) / n

    in_flow = {t: 0.0 for t in known}
    out_flow = {t: 0.0 for t in known}
    for rec in ds.od_flows:
        o_in, d_in = rec.origin.is_in_city, rec.dest.is_in_city
        if o_in and d_in:
            if rec.origin.tract_id in known:
                in_flow[rec.origin.tract_id] += rec.volume
            if rec.dest.tract_id in known:
                in_flow[rec.dest.tract_id] += rec.volume
        else:
            tid = rec.origin.tract_id if o_in else rec.dest.tract_id
            if tid in known:
                out_flow[tid] += rec.volume

    days = ds.n_days
    per_tract_in = [in_flow[t] / days for t in sorted(known)]
    per_tract_out = [out_flow[t] / days for t in sorted(known)]
    summary = FlowSummary(
        in_city_mean=statistics.fmean(per_tract_in),
        in_city_sd=statistics.pstdev(per_tract_in),
        out_city_mean=statistics.fmean(per_tract_out),
        out_city_sd=statistics.pstdev(per_tract_out),
    )
    return ValidationReport(tuple(violations), density, summary)


def _finite(x: float) -> bool:
    return x == x and x not in (float("inf"), float("-inf"))
