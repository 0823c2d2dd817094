"""Cross-city transfer: pretrain on sources, fine-tune on the target, vote.

The protocol has three steps: a source model is pretrained on seven months
of source-city data; its weights initialize the target model; the target
model is fine-tuned end to end (no layers frozen) on the target's k-month
window with standardization refit locally. A scarcity baseline trains the
same window from random initialization. Predictions from several fine-tuned
models combine by majority voting: a tract-day is a hotspot when at least
half the members say so.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import date

from .domain import CityDataset
from .errors import ArchitectureMismatch, DomainMismatch
from .training import (
    CityBundle,
    PredictionSet,
    TrainConfig,
    TrainedModel,
    make_bundle,
    make_splits,
    train_on_bundle,
)


@dataclass
class TransferRun:
    source_city: str
    target_city: str
    k: int
    test_month: tuple[int, int]
    fine_tuned: TrainedModel
    source_checksum: int


@dataclass(frozen=True)
class VotingEnsemble:
    members: tuple[PredictionSet, ...]

    def __post_init__(self):
        if len(self.members) < 2:
            raise DomainMismatch("ensemble needs at least 2 members")
        domain = self.members[0].domain
        for m in self.members[1:]:
            if m.domain != domain:
                raise DomainMismatch("ensemble members cover different (tract, day) domains")


def pretrain_source(
    source: CityDataset | CityBundle,
    crime_class: str,
    test_month: tuple[int, int],
    cfg: TrainConfig,
) -> TrainedModel:
    """Source model over the 7 months preceding ``test_month``, random init."""
    bundle = source if isinstance(source, CityBundle) else make_bundle(source, crime_class)
    splits = make_splits(test_month, 7, bundle.period)
    return train_on_bundle(bundle, splits, cfg, init=None)


def fine_tune(
    source_params,
    target: CityDataset | CityBundle,
    crime_class: str,
    k: int,
    test_month: tuple[int, int],
    cfg: TrainConfig,
    source_city: str = "",
) -> TransferRun:
    """Fine-tune transferred weights on the target's k-month window.

    ``source_params`` is a :class:`TrainedModel` or bare :class:`ModelParams`.
    All layers train; the transferred weights themselves compete as the
    epoch-0 checkpoint.
    """
    params = getattr(source_params, "params", source_params)
    if params.descriptor != cfg.arch:
        raise ArchitectureMismatch(
            f"source descriptor {params.descriptor} != config arch {cfg.arch}"
        )
    bundle = target if isinstance(target, CityBundle) else make_bundle(target, crime_class)
    splits = make_splits(test_month, k, bundle.period)
    model = train_on_bundle(bundle, splits, cfg, init=params)
    return TransferRun(
        source_city=source_city,
        target_city=bundle.city_name,
        k=k,
        test_month=test_month,
        fine_tuned=model,
        source_checksum=params.checksum(),
    )


def train_baseline(
    target: CityDataset | CityBundle,
    crime_class: str,
    k: int,
    test_month: tuple[int, int],
    cfg: TrainConfig,
) -> TrainedModel:
    """Scarcity baseline: same window and schedule as fine-tuning, random init."""
    bundle = target if isinstance(target, CityBundle) else make_bundle(target, crime_class)
    splits = make_splits(test_month, k, bundle.period)
    return train_on_bundle(bundle, splits, cfg, init=None)


def majority_vote(ensemble: VotingEnsemble) -> PredictionSet:
    """Hotspot where at least half the members predict one; ties vote hotspot.

    The probability field is the plain member mean, kept for inspection; the
    label comes from the vote count alone.
    """
    members = ensemble.members
    n = len(members)
    entries: dict[tuple[str, date], tuple[float, int]] = {}
    for key in members[0].entries:
        votes = sum(m.entries[key][1] for m in members)
        mean_p = sum(m.entries[key][0] for m in members) / n
        entries[key] = (mean_p, int(2 * votes >= n))
    return PredictionSet(entries)
