"""Per-(tract, day) feature panel, hotspot labels, and standardization.

Each tract-day carries 11 raw channels: the daily crime count of the selected
class followed by ten mobility features, ordered as

    0  crime count
    1  in-city inflow volume        2  in-city outflow volume
    3  out-of-city inflow volume    4  out-of-city outflow volume
    5  #tracts by in-city inflow    6  #tracts by in-city outflow
    7  #counties by out-of-city inflow   8  #counties by out-of-city outflow
    9  #states by out-of-city inflow    10  #states by out-of-city outflow

Inflow means the tract is the destination; outflow means it is the origin.
Diversity channels count distinct counterpart regions with positive volume
that day; self-flows count toward volumes but never toward diversity.
Counties are identified by their (state, county) pair. Absent activity is an
explicit zero. Standardization is log(1+x) followed by per-channel z-scoring;
day-of-week rides along raw.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np

from .domain import CityDataset, day_of_week
from .errors import EmptyWindow, InsufficientHistory

N_CHANNELS = 11
SIGMA_FLOOR = 1e-8

CHANNEL_NAMES = (
    "crime_count",
    "in_inflow_vol",
    "in_outflow_vol",
    "out_inflow_vol",
    "out_outflow_vol",
    "in_inflow_tracts",
    "in_outflow_tracts",
    "out_inflow_counties",
    "out_outflow_counties",
    "out_inflow_states",
    "out_outflow_states",
)


@dataclass(frozen=True)
class FeatureVector:
    crime_count: int
    mob: tuple[float, ...]
    dow: int

    def __post_init__(self):
        if len(self.mob) != 10:
            raise ValueError("expected 10 mobility channels")

    def as_array(self) -> np.ndarray:
        return np.array([float(self.crime_count), *self.mob], dtype=np.float64)


@dataclass(frozen=True)
class FeaturePanel:
    """Dense (tract, day, channel) array over the full study period."""

    tract_ids: tuple[str, ...]
    start: date
    values: np.ndarray  # (n_tracts, n_days, 11) float64, read-only
    dow: np.ndarray  # (n_days,) int8, read-only

    def __post_init__(self):
        self.values.flags.writeable = False
        self.dow.flags.writeable = False

    @property
    def n_tracts(self) -> int:
        return self.values.shape[0]

    @property
    def n_days(self) -> int:
        return self.values.shape[1]

    @property
    def end(self) -> date:
        return self.start + timedelta(days=self.n_days - 1)

    def tract_index(self, tract_id: str) -> int:
        try:
            return self._index[tract_id]
        except AttributeError:
            object.__setattr__(
                self, "_index", {t: i for i, t in enumerate(self.tract_ids)}
            )
            return self._index[tract_id]

    def day_index(self, d: date) -> int:
        return (d - self.start).days

    def vector(self, tract_id: str, d: date) -> FeatureVector:
        row = self.values[self.tract_index(tract_id), self.day_index(d)]
        return FeatureVector(int(row[0]), tuple(row[1:]), int(self.dow[self.day_index(d)]))


@dataclass(frozen=True)
class HotspotLabels:
    """1 where the tract had at least one incident of the class that day."""

    tract_ids: tuple[str, ...]
    start: date
    labels: np.ndarray  # (n_tracts, n_days) uint8, read-only

    def __post_init__(self):
        self.labels.flags.writeable = False

    def label(self, tract_id: str, d: date) -> int:
        i = self.tract_ids.index(tract_id)
        return int(self.labels[i, (d - self.start).days])


def build_panel(ds: CityDataset, crime_class: str) -> tuple[FeaturePanel, HotspotLabels]:
    """Aggregate crimes and OD flows into the dense panel plus labels.

    Records or events referencing unknown tracts or dates outside the study
    period are skipped (``validate_dataset`` is the reporting channel for
    those). Labels come from crime counts of ``crime_class`` only.
    """
    tract_ids = ds.tract_ids
    index = {t: i for i, t in enumerate(tract_ids)}
    n, d_days = len(tract_ids), ds.n_days
    values = np.zeros((n, d_days, N_CHANNELS), dtype=np.float64)

    ti, di = [], []
    for ev in ds.crimes:
        if ds.crime_class_map.get(ev.category) != crime_class:
            continue
        i = index.get(ev.tract_id)
        day = ds.day_index(ev.date)
        if i is None or not (0 <= day < d_days):
            continue
        ti.append(i)
        di.append(day)
    if ti:
        np.add.at(values[:, :, 0], (np.array(ti), np.array(di)), 1.0)

    _accumulate_mobility(ds, index, values)

    dow = np.array(
        [day_of_week(ds.period[0] + timedelta(days=k)) for k in range(d_days)],
        dtype=np.int8,
    )
    panel = FeaturePanel(tract_ids, ds.period[0], values, dow)
    labels = HotspotLabels(
        tract_ids, ds.period[0], (values[:, :, 0] >= 1).astype(np.uint8)
    )
    return panel, labels


def _accumulate_mobility(ds: CityDataset, index: dict[str, int], values: np.ndarray) -> None:
    n, d_days = values.shape[0], values.shape[1]
    # Row layout: day, in-city origin idx (-1 if external), in-city dest idx,
    # external region code (-1 if none), volume. External codes are interned
    # (state, county) pairs; the state code is recovered from the same table.
    county_codes: dict[tuple[str, str], int] = {}
    state_of_county: list[int] = []
    state_codes: dict[str, int] = {}

    day_l, oi_l, dj_l, ext_l, vol_l = [], [], [], [], []
    for rec in ds.od_flows:
        day = ds.day_index(rec.date)
        if not (0 <= day < d_days):
            continue
        oi = index.get(rec.origin.tract_id, -1) if rec.origin.is_in_city else -1
        dj = index.get(rec.dest.tract_id, -1) if rec.dest.is_in_city else -1
        if rec.origin.is_in_city and oi < 0 or rec.dest.is_in_city and dj < 0:
            continue  # unknown tract; reported by validate_dataset
        ext = -1
        ext_ref = None
        if not rec.origin.is_in_city:
            ext_ref = rec.origin
        elif not rec.dest.is_in_city:
            ext_ref = rec.dest
        if ext_ref is not None:
            key = (ext_ref.state, ext_ref.county)
            ext = county_codes.get(key, -1)
            if ext < 0:
                ext = len(county_codes)
                county_codes[key] = ext
                state_of_county.append(
                    state_codes.setdefault(ext_ref.state, len(state_codes))
                )
        day_l.append(day)
        oi_l.append(oi)
        dj_l.append(dj)
        ext_l.append(ext)
        vol_l.append(rec.volume)
    if not day_l:
        return

    day = np.array(day_l, dtype=np.int64)
    oi = np.array(oi_l, dtype=np.int64)
    dj = np.array(dj_l, dtype=np.int64)
    ext = np.array(ext_l, dtype=np.int64)
    vol = np.array(vol_l, dtype=np.float64)
    county_state = np.array(state_of_county, dtype=np.int64)

    in_in = (oi >= 0) & (dj >= 0)
    from_ext = (oi < 0)
    to_ext = (dj < 0)

    np.add.at(values[:, :, 1], (dj[in_in], day[in_in]), vol[in_in])
    np.add.at(values[:, :, 2], (oi[in_in], day[in_in]), vol[in_in])
    np.add.at(values[:, :, 3], (dj[from_ext], day[from_ext]), vol[from_ext])
    np.add.at(values[:, :, 4], (oi[to_ext], day[to_ext]), vol[to_ext])

    pos = vol > 0

    def distinct_count(mask: np.ndarray, tract: np.ndarray, other: np.ndarray, channel: int):
        # one count per distinct (tract, day, counterpart) triple
        if not mask.any():
            return
        triples = np.stack([tract[mask], day[mask], other[mask]], axis=1)
        uniq = np.unique(triples, axis=0)
        np.add.at(values[:, :, channel], (uniq[:, 0], uniq[:, 1]), 1.0)

    state_code = np.where(ext >= 0, county_state[np.maximum(ext, 0)], -1) if len(county_state) else ext

    non_self = in_in & (oi != dj) & pos
    distinct_count(non_self, dj, oi, 5)
    distinct_count(non_self, oi, dj, 6)
    distinct_count(from_ext & pos, dj, ext, 7)
    distinct_count(to_ext & pos, oi, ext, 8)
    distinct_count(from_ext & pos, dj, state_code, 9)
    distinct_count(to_ext & pos, oi, state_code, 10)


def lookback_sequence(panel: FeaturePanel, tract_id: str, t: date, lookback: int) -> list[FeatureVector]:
    """The ``lookback`` feature vectors for days t-lookback .. t-1, oldest first."""
    if lookback < 1:
        raise ValueError("lookback must be >= 1")
    t_idx = panel.day_index(t)
    if t_idx - lookback < 0:
        raise InsufficientHistory(
            f"day {t} needs {lookback} days of history before {panel.start}"
        )
    if t_idx - 1 >= panel.n_days:
        raise InsufficientHistory(f"day {t} lies beyond the panel end {panel.end}")
    return [
        panel.vector(tract_id, t - timedelta(days=back))
        for back in range(lookback, 0, -1)
    ]


@dataclass(frozen=True)
class FeatureStats:
    """Per-channel mean/sd of log1p-transformed values over a fit window."""

    mean: np.ndarray  # (11,)
    sd: np.ndarray  # (11,), floored at SIGMA_FLOOR

    def __post_init__(self):
        self.mean.flags.writeable = False
        self.sd.flags.writeable = False


def fit_stats(panel: FeaturePanel, window: tuple[date, date]) -> FeatureStats:
    """Fit standardization statistics over all (tract, day) in ``window``."""
    lo = max(panel.day_index(window[0]), 0)
    hi = min(panel.day_index(window[1]), panel.n_days - 1)
    if hi < lo:
        raise EmptyWindow(f"window {window[0]}..{window[1]} has no panel days")
    block = np.log1p(panel.values[:, lo : hi + 1, :])
    flat = block.reshape(-1, N_CHANNELS)
    mean = flat.mean(axis=0)
    sd = np.maximum(flat.std(axis=0), SIGMA_FLOOR)
    return FeatureStats(mean, sd)


def apply_stats(stats: FeatureStats, vector: FeatureVector) -> np.ndarray:
    """Standardize one feature vector's 11 channels (dow passes through separately)."""
    return (np.log1p(vector.as_array()) - stats.mean) / stats.sd


def standardize_panel(stats: FeatureStats, panel: FeaturePanel) -> np.ndarray:
    """Vectorized :func:`apply_stats` over the whole panel: (n_tracts, n_days, 11)."""
    return (np.log1p(panel.values) - stats.mean) / stats.sd


def unstandardize(stats: FeatureStats, z: np.ndarray) -> np.ndarray:
    """Invert standardization back to raw feature scale."""
    return np.expm1(z * stats.sd + stats.mean)


def export_panel_csv(panel: FeaturePanel, path) -> None:
    """Inspection dump: one row per (tract, day) with raw channels and dow."""
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["tract_id", "date", *CHANNEL_NAMES, "dow"])
        for i, tid in enumerate(panel.tract_ids):
            for k in range(panel.n_days):
                d = panel.start + timedelta(days=k)
                row = panel.values[i, k]
                w.writerow(
                    [tid, d.isoformat(), int(row[0]), *(repr(v) for v in row[1:]), int(panel.dow[k])]
                )
