"""CSV loaders for tracts, crimes, and OD flows, plus dataset (de)serialization.

File formats (UTF-8, comma separated, ``\\n`` or ``\\r\\n`` endings):

* ``tracts.csv`` -- ``tract_id,x_meters,y_meters``
* ``crimes.csv`` -- ``date,tract_id,category`` with ISO-8601 dates
* ``od.csv``     -- ``date,origin,dest,volume`` where endpoints are written
  ``t:<tract_id>`` (in-city) or ``x:<state>/<county>`` (external)

Loaders are total over byte streams: every malformed row raises
:class:`ParseError` naming its line. Unknown crime categories and
both-external OD rows are logged and dropped rather than fatal.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

from .domain import (
    DEFAULT_CRIME_CLASS_MAP,
    CityDataset,
    CrimeEvent,
    ODFlowRecord,
    RegionRef,
    Tract,
)
from .errors import DuplicateTract, ParseError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class IngestConfig:
    crime_class_map: dict[str, str] = field(
        default_factory=lambda: dict(DEFAULT_CRIME_CLASS_MAP)
    )
    tracts_path: str = "tracts.csv"
    crimes_path: str = "crimes.csv"
    od_path: str = "od.csv"
    #: optional (start, end) override; default derives the period from the data
    period: tuple[date, date] | None = None
    #: global multiplier for raw flow volumes (1.0 when volumes arrive pre-scaled)
    volume_scale: float = 1.0


def _reader(path):
    fh = open(path, newline="", encoding="utf-8")
    return fh, csv.reader(fh)


def _expect_header(path, row, expected: list[str]):
    if row is None or [c.strip() for c in row] != expected:
        raise ParseError(path, 1, f"expected header {','.join(expected)}")


def _parse_date(path, line_no: int, text: str) -> date:
    try:
        return date.fromisoformat(text.strip())
    except ValueError as exc:
        raise ParseError(path, line_no, f"bad date {text!r}: {exc}") from None


def load_tracts(path) -> list[Tract]:
    """Parse ``tracts.csv`` into unique, finite-coordinate tracts."""
    fh, rows = _reader(path)
    with fh:
        _expect_header(path, next(rows, None), ["tract_id", "x_meters", "y_meters"])
        out: list[Tract] = []
        seen: set[str] = set()
        for line_no, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(path, line_no, f"expected 3 fields, got {len(row)}")
            tid = row[0].strip()
            if tid in seen:
                raise DuplicateTract(f"{path}:{line_no}: duplicate tract id {tid!r}")
            try:
                x, y = float(row[1]), float(row[2])
            except ValueError:
                raise ParseError(path, line_no, f"non-numeric coordinate in {row[1:]}") from None
            try:
                out.append(Tract(tid, x, y))
            except ValueError as exc:
                raise ParseError(path, line_no, str(exc)) from None
            seen.add(tid)
    return out


def load_crimes(path, cfg: IngestConfig) -> list[CrimeEvent]:
    """Parse ``crimes.csv``; events with categories outside the class map are dropped."""
    fh, rows = _reader(path)
    dropped: dict[str, int] = {}
    with fh:
        _expect_header(path, next(rows, None), ["date", "tract_id", "category"])
        out: list[CrimeEvent] = []
        for line_no, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(path, line_no, f"expected 3 fields, got {len(row)}")
            d = _parse_date(path, line_no, row[0])
            category = row[2].strip()
            if category not in cfg.crime_class_map:
                dropped[category] = dropped.get(category, 0) + 1
                continue
            out.append(CrimeEvent(d, row[1].strip(), category))
    for category, count in sorted(dropped.items()):
        log.warning("%s: dropped %d rows with unknown category %r", path, count, category)
    return out


def _parse_endpoint(path, line_no: int, text: str) -> RegionRef:
    text = text.strip()
    if text.startswith("t:"):
        tid = text[2:]
        if not tid:
            raise ParseError(path, line_no, "empty tract id in endpoint")
        return RegionRef.in_city(tid)
    if text.startswith("x:"):
        body = text[2:]
        state, sep, county = body.partition("/")
        if not sep or not state or not county:
            raise ParseError(path, line_no, f"bad external endpoint {text!r}")
        return RegionRef.external(state, county)
    raise ParseError(path, line_no, f"bad endpoint syntax {text!r}")


def load_od_flows(path, volume_scale: float = 1.0) -> list[ODFlowRecord]:
    """Parse ``od.csv``; rows with both endpoints external are dropped with a warning."""
    fh, rows = _reader(path)
    n_external = 0
    with fh:
        _expect_header(path, next(rows, None), ["date", "origin", "dest", "volume"])
        out: list[ODFlowRecord] = []
        for line_no, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(path, line_no, f"expected 4 fields, got {len(row)}")
            d = _parse_date(path, line_no, row[0])
            origin = _parse_endpoint(path, line_no, row[1])
            dest = _parse_endpoint(path, line_no, row[2])
            try:
                volume = float(row[3])
            except ValueError:
                raise ParseError(path, line_no, f"non-numeric volume {row[3]!r}") from None
            if volume < 0 or volume != volume or volume in (float("inf"), float("-inf")):
                raise ParseError(path, line_no, f"volume must be finite and >= 0, got {row[3]}")
            if not origin.is_in_city and not dest.is_in_city:
                n_external += 1
                continue
            out.append(ODFlowRecord(d, origin, dest, volume * volume_scale))
    if n_external:
        log.warning("%s: dropped %d rows with both endpoints external", path, n_external)
    return out


def load_city(city_name: str, base_dir, cfg: IngestConfig | None = None) -> CityDataset:
    """Load the three CSVs under ``base_dir`` into a validated dataset."""
    cfg = cfg or IngestConfig()
    base = Path(base_dir)
    tracts = load_tracts(base / cfg.tracts_path)
    crimes = load_crimes(base / cfg.crimes_path, cfg)
    flows = load_od_flows(base / cfg.od_path, cfg.volume_scale)
    period = cfg.period
    if period is None:
        dates = [e.date for e in crimes] + [r.date for r in flows]
        if not dates:
            raise ParseError(base / cfg.crimes_path, 1, "no dated rows to derive a period from")
        period = (min(dates), max(dates))
    return CityDataset(
        city_name=city_name,
        tracts=tuple(tracts),
        crimes=tuple(crimes),
        od_flows=tuple(flows),
        period=period,
        crime_class_map=dict(cfg.crime_class_map),
    )


def _endpoint_str(ref: RegionRef) -> str:
    if ref.is_in_city:
        return f"t:{ref.tract_id}"
    return f"x:{ref.state}/{ref.county}"


def save_city(ds: CityDataset, base_dir) -> None:
    """Write the three CSVs for ``ds``; inverse of :func:`load_city` up to ordering."""
    base = Path(base_dir)
    base.mkdir(parents=True, exist_ok=True)
    with open(base / "tracts.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["tract_id", "x_meters", "y_meters"])
        for t in ds.tracts:
            w.writerow([t.id, repr(t.centroid_x), repr(t.centroid_y)])
    with open(base / "crimes.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "tract_id", "category"])
        for ev in sorted(ds.crimes, key=lambda e: (e.date, e.tract_id, e.category)):
            w.writerow([ev.date.isoformat(), ev.tract_id, ev.category])
    with open(base / "od.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "origin", "dest", "volume"])
        for rec in sorted(
            ds.od_flows,
            key=lambda r: (r.date, _endpoint_str(r.origin), _endpoint_str(r.dest)),
        ):
            w.writerow(
                [rec.date.isoformat(), _endpoint_str(rec.origin), _endpoint_str(rec.dest), repr(rec.volume)]
            )
