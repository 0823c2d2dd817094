"""Run configuration: one JSON document feeding ingestion, training, and runs.

The document is self-describing key/value JSON; any section may be omitted
and falls back to defaults. CLI flags override document values; the fully
resolved configuration is echoed into every output manifest.

Example::

    {
      "crime_class_map": {"burglary": "property", "robbery": "violent"},
      "paths": {"tracts": "tracts.csv", "crimes": "crimes.csv", "od": "od.csv"},
      "period": {"start": "2020-01-01", "end": "2020-12-31"},
      "volume_scale": 1.0,
      "train": {"lr_grid": [0.001], "batch_size": 512, "max_epochs": 8,
                "patience": 2, "seed": 0,
                "arch": {"lookback_days": 7, "conv1_filters": 16,
                          "conv2_filters": 32, "hidden_units": 32}},
      "matrix": {"crime_class": "property", "k_values": [1, 2, 3, 4, 5, 6, 7],
                  "test_months": null, "master_seed": 0, "jobs": 1}
    }
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from datetime import date
from pathlib import Path

from .domain import DEFAULT_CRIME_CLASS_MAP, PROPERTY
from .errors import DataError
from .evaluation import MatrixConfig
from .ingest import IngestConfig
from .net import ArchitectureDescriptor
from .training import TrainConfig

CONFIG_ENV_VAR = "HOTSPOT_TRANSFER_CONFIG"

#: training profile sized for desk-scale experiments (single-digit-minute runs
#: on a laptop core); override any field through the config document
DESK_TRAIN = TrainConfig(
    lr_grid=(1e-3,),
    batch_size=512,
    max_epochs=6,
    patience=2,
    arch=ArchitectureDescriptor(conv1_filters=16, conv2_filters=32, hidden_units=32),
)


@dataclass(frozen=True)
class RunConfig:
    ingest: IngestConfig = field(default_factory=IngestConfig)
    train: TrainConfig = DESK_TRAIN
    crime_class: str = PROPERTY
    k_values: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7)
    test_months: tuple[tuple[int, int], ...] | None = None
    master_seed: int = 0
    jobs: int = 1

    def matrix(self) -> MatrixConfig:
        return MatrixConfig(
            train=self.train,
            k_values=self.k_values,
            test_months=self.test_months,
            master_seed=self.master_seed,
            jobs=self.jobs,
        )

    def to_dict(self) -> dict:
        doc = {
            "crime_class_map": dict(self.ingest.crime_class_map),
            "paths": {
                "tracts": self.ingest.tracts_path,
                "crimes": self.ingest.crimes_path,
                "od": self.ingest.od_path,
            },
            "volume_scale": self.ingest.volume_scale,
            "train": asdict(self.train),
            "matrix": {
                "crime_class": self.crime_class,
                "k_values": list(self.k_values),
                "test_months": None
                if self.test_months is None
                else [f"{y}-{m:02d}" for (y, m) in self.test_months],
                "master_seed": self.master_seed,
                "jobs": self.jobs,
            },
        }
        if self.ingest.period is not None:
            doc["period"] = {
                "start": self.ingest.period[0].isoformat(),
                "end": self.ingest.period[1].isoformat(),
            }
        doc["train"]["lr_grid"] = list(self.train.lr_grid)
        return doc


def _parse_month(text: str) -> tuple[int, int]:
    try:
        y, m = text.split("-")
        month = (int(y), int(m))
        if not 1 <= month[1] <= 12:
            raise ValueError
        return month
    except ValueError:
        raise DataError(f"bad month {text!r}, expected YYYY-MM") from None


def load_run_config(path=None) -> RunConfig:
    """Parse the JSON config document; ``None`` consults the environment."""
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR)
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    return run_config_from_dict(doc)


def run_config_from_dict(doc: dict) -> RunConfig:
    paths = doc.get("paths", {})
    period = None
    if "period" in doc and doc["period"]:
        period = (
            date.fromisoformat(doc["period"]["start"]),
            date.fromisoformat(doc["period"]["end"]),
        )
    ingest = IngestConfig(
        crime_class_map=dict(doc.get("crime_class_map", DEFAULT_CRIME_CLASS_MAP)),
        tracts_path=paths.get("tracts", "tracts.csv"),
        crimes_path=paths.get("crimes", "crimes.csv"),
        od_path=paths.get("od", "od.csv"),
        period=period,
        volume_scale=float(doc.get("volume_scale", 1.0)),
    )
    t = doc.get("train", {})
    arch_doc = t.get("arch", {})
    arch = replace(DESK_TRAIN.arch, **arch_doc) if arch_doc else DESK_TRAIN.arch
    train = TrainConfig(
        lr_grid=tuple(t.get("lr_grid", DESK_TRAIN.lr_grid)),
        batch_size=int(t.get("batch_size", DESK_TRAIN.batch_size)),
        max_epochs=int(t.get("max_epochs", DESK_TRAIN.max_epochs)),
        patience=int(t.get("patience", DESK_TRAIN.patience)),
        seed=int(t.get("seed", DESK_TRAIN.seed)),
        beta1=float(t.get("beta1", DESK_TRAIN.beta1)),
        beta2=float(t.get("beta2", DESK_TRAIN.beta2)),
        eps=float(t.get("eps", DESK_TRAIN.eps)),
        arch=arch,
    )
    m = doc.get("matrix", {})
    test_months = m.get("test_months")
    if test_months:
        test_months = tuple(_parse_month(x) for x in test_months)
    return RunConfig(
        ingest=ingest,
        train=train,
        crime_class=m.get("crime_class", PROPERTY),
        k_values=tuple(m.get("k_values", (1, 2, 3, 4, 5, 6, 7))),
        test_months=test_months,
        master_seed=int(m.get("master_seed", 0)),
        jobs=int(m.get("jobs", 1)),
    )
