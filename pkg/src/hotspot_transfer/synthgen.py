"""Seeded generator of synthetic city families with shared crime dynamics.

Each city gets tract centroids scattered over a square, gravity-kernel OD
flows with seasonal and weekday modulation plus external county/state flows,
and daily crime counts drawn from a log-linear Poisson intensity driven by
recent crime history, the previous day's in-city inflow, and a weekend
indicator:

    log lam = bias + tract_effect + w_hist * mean(last 7 days of counts)
              + w_mob * log1p(yesterday's in-city inflow) + w_dow * weekend

Only a configurable share of tracts is "active" (materially nonzero
intensity), which is what keeps the monthly hotspot density in a realistic
band instead of saturating. All cities in a family share the dynamics
weights up to a small per-city jitter, so knowledge learned in one city
transfers; a divergence knob adds extra jitter to the first city to emulate
a target whose local dynamics conflict with the sources'.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from .domain import PROPERTY, VIOLENT, CityDataset, CrimeEvent, ODFlowRecord, RegionRef, Tract
from .ingest import save_city

CLASS_CATEGORIES = {
    PROPERTY: ("arson", "burglary", "larceny-theft", "motor vehicle theft"),
    VIOLENT: ("aggravated assault", "forcible rape", "murder", "robbery"),
}


@dataclass(frozen=True)
class DynamicsWeights:
    bias: float
    w_hist: float
    w_mob: float
    w_dow: float

    def as_array(self) -> np.ndarray:
        return np.array([self.bias, self.w_hist, self.w_mob, self.w_dow])


@dataclass(frozen=True)
class FamilyParams:
    n_cities: int = 4
    tracts_per_city: int = 40
    start: date = date(2020, 1, 1)
    months: int = 12
    #: shared dynamics per crime class
    weights: dict = field(
        default_factory=lambda: {
            PROPERTY: DynamicsWeights(bias=-4.45, w_hist=0.45, w_mob=0.75, w_dow=0.25),
            VIOLENT: DynamicsWeights(bias=-5.15, w_hist=0.40, w_mob=0.70, w_dow=0.35),
        }
    )
    #: sd of the per-city jitter applied to every dynamics weight
    city_variation: float = 0.03
    #: extra jitter applied to city 0 only (the conventional target city)
    divergence: float = 0.0
    active_share: float = 0.30
    effect_sigma: float = 0.55
    inactive_offset: float = -7.0
    #: gravity kernel constants
    area_m: float = 6000.0
    mass_sigma: float = 0.45
    dist_scale_m: float = 900.0
    daily_incity_per_tract: float = 90.0
    min_pair_rate: float = 0.25
    #: external-region taxonomy and flow level
    n_states: int = 8
    n_counties: int = 30
    counties_per_tract: int = 8
    daily_external_per_tract: float = 40.0
    #: temporal modulation
    season_amp: float = 0.20
    weekend_od_factor: float = 1.25
    #: cap on log-intensity, guards Poisson blowups in extreme configs
    max_log_lam: float = 3.0


@dataclass(frozen=True)
class CityDebug:
    """Ground-truth intensities kept for generator self-checks."""

    intensity: dict  # crime class -> (n_tracts, n_days) lam array
    city_weights: dict  # crime class -> DynamicsWeights actually used
    inflow: np.ndarray  # (n_tracts, n_days) realized in-city inflow volume


def _period(params: FamilyParams) -> tuple[date, date]:
    from .domain import add_months, month_bounds

    last_y, last_m = add_months(params.start.year, params.start.month, params.months - 1)
    return params.start, month_bounds(last_y, last_m)[1]


def _rng(*entropy) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed=np.random.SeedSequence(entropy)))


def generate_city(
    params: FamilyParams,
    city_seed: int,
    city_name: str = "city",
    city_weights: dict | None = None,
    return_debug: bool = False,
):
    """One synthetic city; same (params, seed) yields byte-identical data."""
    rng = _rng(city_seed)
    n = params.tracts_per_city
    period = _period(params)
    n_days = (period[1] - period[0]).days + 1
    dates = [period[0] + timedelta(days=k) for k in range(n_days)]
    weekend = np.array([d.weekday() >= 5 for d in dates], dtype=np.float64)
    doy = np.array([d.timetuple().tm_yday for d in dates], dtype=np.float64)
    season = 1.0 + params.season_amp * np.sin(2.0 * np.pi * doy / 365.0)
    od_factor = season * np.where(weekend > 0, params.weekend_od_factor, 1.0)

    xy = rng.uniform(0.0, params.area_m, size=(n, 2))
    tracts = tuple(
        Tract(f"T{i:03d}", float(xy[i, 0]), float(xy[i, 1])) for i in range(n)
    )
    masses = rng.lognormal(mean=0.0, sigma=params.mass_sigma, size=n)

    diff = xy[:, None, :] - xy[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    mu = masses[:, None] * masses[None, :] / (1.0 + (dist / params.dist_scale_m) ** 2)
    mu *= params.daily_incity_per_tract * n / mu.sum()
    mu[mu < params.min_pair_rate] = 0.0

    # external taxonomy: counties partitioned round-robin across states
    state_names = [f"S{i:02d}" for i in range(params.n_states)]
    county_refs = [
        RegionRef.external(state_names[c % params.n_states], f"C{c:03d}")
        for c in range(params.n_counties)
    ]
    affinity = np.zeros((n, params.n_counties))
    for i in range(n):
        chosen = rng.choice(params.n_counties, size=params.counties_per_tract, replace=False)
        w = rng.lognormal(mean=0.0, sigma=0.6, size=params.counties_per_tract)
        affinity[i, chosen] = w
    affinity *= params.daily_external_per_tract / max(affinity.sum(axis=1).mean(), 1e-12) / 2.0
    # halved because each tract gets both an inbound and an outbound draw

    tract_refs = [RegionRef.in_city(t.id) for t in tracts]
    flows: list[ODFlowRecord] = []
    inflow = np.zeros((n, n_days))
    for t in range(n_days):
        vol = rng.poisson(mu * od_factor[t])
        inflow[:, t] = vol.sum(axis=0)
        oi, dj = np.nonzero(vol)
        d = dates[t]
        for o, j in zip(oi, dj):
            flows.append(ODFlowRecord(d, tract_refs[o], tract_refs[j], float(vol[o, j])))
        ext_in = rng.poisson(affinity * od_factor[t])
        ext_out = rng.poisson(affinity * od_factor[t])
        for i, c in zip(*np.nonzero(ext_in)):
            flows.append(ODFlowRecord(d, county_refs[c], tract_refs[i], float(ext_in[i, c])))
        for i, c in zip(*np.nonzero(ext_out)):
            flows.append(ODFlowRecord(d, tract_refs[i], county_refs[c], float(ext_out[i, c])))

    if city_weights is None:
        city_weights = dict(params.weights)
    active = rng.random(n) < params.active_share
    crimes: list[CrimeEvent] = []
    intensity: dict[str, np.ndarray] = {}
    for crime_class in (PROPERTY, VIOLENT):
        w = city_weights[crime_class]
        effect = np.where(
            active,
            rng.normal(0.0, params.effect_sigma, size=n),
            params.inactive_offset,
        )
        counts = np.zeros((n, n_days), dtype=np.int64)
        lam_all = np.zeros((n, n_days))
        categories = CLASS_CATEGORIES[crime_class]
        for t in range(n_days):
            hist7 = counts[:, max(0, t - 7) : t].mean(axis=1) if t > 0 else np.zeros(n)
            mob = np.log1p(inflow[:, t - 1]) if t > 0 else np.zeros(n)
            log_lam = w.bias + effect + w.w_hist * hist7 + w.w_mob * mob + w.w_dow * weekend[t]
            lam = np.exp(np.minimum(log_lam, params.max_log_lam))
            lam_all[:, t] = lam
            counts[:, t] = rng.poisson(lam)
            for i in np.nonzero(counts[:, t])[0]:
                picks = rng.integers(0, len(categories), size=counts[i, t])
                for c in picks:
                    crimes.append(CrimeEvent(dates[t], tracts[i].id, categories[c]))
        intensity[crime_class] = lam_all

    ds = CityDataset(
        city_name=city_name,
        tracts=tracts,
        crimes=tuple(crimes),
        od_flows=tuple(flows),
        period=period,
    )
    if return_debug:
        return ds, CityDebug(intensity, city_weights, inflow)
    return ds


def _jitter_weights(params: FamilyParams, rng: np.random.Generator, extra: float) -> dict:
    scale = params.city_variation + extra
    out = {}
    for crime_class, w in params.weights.items():
        noise = rng.normal(0.0, scale, size=4)
        out[crime_class] = DynamicsWeights(
            bias=w.bias + noise[0],
            w_hist=w.w_hist + noise[1],
            w_mob=w.w_mob + noise[2],
            w_dow=w.w_dow + noise[3],
        )
    return out


def generate_family(
    params: FamilyParams, master_seed: int, return_debug: bool = False
):
    """Cities sharing dynamics weights; layouts and effects differ per city."""
    if params.n_cities < 2:
        raise ValueError("a family needs at least 2 cities")
    datasets, debugs = [], []
    for i in range(params.n_cities):
        seed_i = int(np.random.SeedSequence((master_seed, i)).generate_state(1)[0])
        jitter_rng = _rng(master_seed, i, 0xD1CE)
        weights = _jitter_weights(params, jitter_rng, params.divergence if i == 0 else 0.0)
        out = generate_city(
            params, seed_i, city_name=f"city{i:02d}", city_weights=weights,
            return_debug=return_debug,
        )
        if return_debug:
            datasets.append(out[0])
            debugs.append(out[1])
        else:
            datasets.append(out)
    if return_debug:
        return datasets, debugs
    return datasets


def family_manifest(params: FamilyParams, master_seed: int) -> dict:
    doc = asdict(params)
    doc["start"] = params.start.isoformat()
    doc["weights"] = {
        cls: asdict(w) for cls, w in params.weights.items()
    }
    doc["master_seed"] = master_seed
    return doc


def write_family(
    params: FamilyParams, master_seed: int, out_dir
) -> list[str]:
    """Generate a family and write per-city CSVs plus the family manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    datasets = generate_family(params, master_seed)
    paths = []
    for ds in datasets:
        city_dir = out / ds.city_name
        save_city(ds, city_dir)
        paths.append(str(city_dir))
    manifest_path = out / "family_manifest.json"
    manifest_path.write_text(
        json.dumps(family_manifest(params, master_seed), indent=1, sort_keys=True),
        encoding="utf-8",
    )
    paths.append(str(manifest_path))
    return paths
