"""Chronological splits, the per-test-month training loop, and prediction.

A training run fits standardization on its train window, then sweeps the
learning-rate grid: for each rate the model trains with seeded per-epoch
shuffling and early stopping on validation F1, and the best (rate, epoch)
checkpoint wins, ties resolved toward the lower rate and earlier epoch. The
untrained initialization itself (epoch 0) is an eligible checkpoint, which
protects tiny fine-tuning windows from destructive updates.

Batch schedules are derived from the seed alone, never from the weights, so
two runs over the same window differing only in initialization consume
byte-identical batches; a digest of the schedule makes that checkable.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np

from .domain import CityDataset, month_bounds, months_back_window
from .errors import ArchitectureMismatch, EmptyTrainingSet, InsufficientHistory
from .features import (
    FeaturePanel,
    FeatureStats,
    HotspotLabels,
    N_CHANNELS,
    build_panel,
    fit_stats,
    standardize_panel,
)
from .net import (
    AdamState,
    ArchitectureDescriptor,
    ModelParams,
    adam_step,
    backward,
    forward_batch,
    init_params,
)
from .spatial import grid_index_array

log = logging.getLogger(__name__)

PREDICT_BATCH = 4096


@dataclass(frozen=True)
class SplitWindows:
    train: tuple[date, date]
    validation: tuple[date, date]
    test_month: tuple[int, int]


def make_splits(
    test_month: tuple[int, int], k: int, period: tuple[date, date] | None = None
) -> SplitWindows:
    """k-month window before ``test_month``: last 15 days validate, rest train."""
    start, end = months_back_window(test_month, k, period)
    val_start = end - timedelta(days=14)
    return SplitWindows(
        train=(start, val_start - timedelta(days=1)),
        validation=(val_start, end),
        test_month=test_month,
    )


@dataclass(frozen=True)
class TrainConfig:
    lr_grid: tuple[float, ...] = (1e-3, 3e-4)
    batch_size: int = 512
    max_epochs: int = 15
    patience: int = 3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    arch: ArchitectureDescriptor = ArchitectureDescriptor()

    def __post_init__(self):
        if not self.lr_grid or min(self.lr_grid) <= 0:
            raise ValueError("lr_grid must be non-empty and positive")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ValueError("batch_size/patience must be >= 1 and max_epochs >= 0")


@dataclass(frozen=True)
class EpochRecord:
    lr: float
    epoch: int  # 0 = untrained initialization
    train_loss: float  # NaN for epoch 0
    val_f1: float


@dataclass
class TrainedModel:
    params: ModelParams
    stats: FeatureStats
    history: tuple[EpochRecord, ...]
    chosen_lr: float
    chosen_epoch: int
    crime_class: str
    batch_digest: str

    @property
    def best_val_f1(self) -> float:
        return max(rec.val_f1 for rec in self.history)


@dataclass(frozen=True)
class PredictionSet:
    """Per-(tract, day) probability and thresholded hotspot label."""

    entries: dict[tuple[str, date], tuple[float, int]]

    @property
    def domain(self) -> frozenset[tuple[str, date]]:
        return frozenset(self.entries)

    def label(self, tract_id: str, d: date) -> int:
        return self.entries[(tract_id, d)][1]


@dataclass(frozen=True)
class CityBundle:
    """Per-(city, crime class) tensors shared by every run over that city."""

    city_name: str
    crime_class: str
    panel: FeaturePanel
    labels: HotspotLabels
    grid_idx: np.ndarray  # (n_tracts, 9) row-major cell tract indices
    period: tuple[date, date]

    @property
    def n_tracts(self) -> int:
        return self.panel.n_tracts


def make_bundle(ds: CityDataset, crime_class: str) -> CityBundle:
    panel, labels = build_panel(ds, crime_class)
    return CityBundle(
        city_name=ds.city_name,
        crime_class=crime_class,
        panel=panel,
        labels=labels,
        grid_idx=grid_index_array(ds.tracts, ds.tract_ids),
        period=ds.period,
    )


def pooled_f1(tp: int, fp: int, fn: int) -> float:
    """F1 from pooled counts; no positives anywhere counts as agreement (1.0)."""
    if tp == 0:
        return 1.0 if fp == 0 and fn == 0 else 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2.0 * precision * recall / (precision + recall)


class _SampleSpace:
    """Standardized tensors plus index bookkeeping for one training run."""

    def __init__(self, bundle: CityBundle, stats: FeatureStats, lookback: int):
        self.bundle = bundle
        self.lookback = lookback
        self.z = standardize_panel(stats, bundle.panel)
        self.onehot = np.eye(7, dtype=np.float64)[bundle.panel.dow]
        self.offsets = np.arange(-lookback, 0, dtype=np.int64)

    def day_range_samples(self, window: tuple[date, date]) -> tuple[np.ndarray, np.ndarray]:
        """All (tract, day) pairs in the window with full look-back history."""
        panel = self.bundle.panel
        lo = max(panel.day_index(window[0]), self.lookback)
        hi = min(panel.day_index(window[1]), panel.n_days - 1)
        if hi < lo:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        days = np.arange(lo, hi + 1, dtype=np.int64)
        n = self.bundle.n_tracts
        ti = np.repeat(np.arange(n, dtype=np.int64), days.size)
        tt = np.tile(days, n)
        return ti, tt

    def assemble(self, ti: np.ndarray, tt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Position-major model inputs for samples (tract index, day index).

        Returns ``(x, dow)`` with ``x`` of shape (B, 9 cells, lookback * 11);
        the gather lands directly in the network's native layout.
        """
        cells = self.bundle.grid_idx[ti]  # (B, 9)
        window = tt[:, None] + self.offsets  # (B, lookback)
        x = self.z[cells[:, :, None], window[:, None, :], :]  # (B, 9, lookback, 11)
        b = ti.shape[0]
        return x.reshape(b, 9, self.lookback * N_CHANNELS), self.onehot[tt]

    def labels_for(self, ti: np.ndarray, tt: np.ndarray) -> np.ndarray:
        return self.bundle.labels.labels[ti, tt].astype(np.float64)


def _val_f1(params: ModelParams, x: np.ndarray, dow: np.ndarray, y: np.ndarray) -> float:
    pred = np.empty(y.shape[0], dtype=np.float64)
    for lo in range(0, y.shape[0], PREDICT_BATCH):
        sl = slice(lo, lo + PREDICT_BATCH)
        pred[sl] = forward_batch(params, x[sl], dow[sl])
    hat = pred >= 0.5
    pos = y >= 0.5
    tp = int(np.sum(hat & pos))
    fp = int(np.sum(hat & ~pos))
    fn = int(np.sum(~hat & pos))
    return pooled_f1(tp, fp, fn)


def _batch_schedule(
    cfg: TrainConfig, n_samples: int, n_runs: int
) -> tuple[list[np.ndarray], str]:
    """Per-epoch shuffles for every lr run, plus a digest of the whole plan.

    Derived from the seed only, so runs differing in initialization still
    consume identical batches.
    """
    perms: list[np.ndarray] = []
    digest = hashlib.sha256()
    digest.update(f"n={n_samples};b={cfg.batch_size}".encode())
    for lr_idx in range(n_runs):
        rng = np.random.Generator(
            np.random.Philox(seed=np.random.SeedSequence((cfg.seed, lr_idx, 0xBA7C4)))
        )
        for _ in range(cfg.max_epochs):
            perm = rng.permutation(n_samples)
            perms.append(perm)
            digest.update(perm.astype("<i8").tobytes())
    return perms, digest.hexdigest()


def train_on_bundle(
    bundle: CityBundle,
    splits: SplitWindows,
    cfg: TrainConfig,
    init: ModelParams | int | None = None,
) -> TrainedModel:
    """Run the lr-grid training loop on precomputed city tensors."""
    lookback = cfg.arch.lookback_days
    stats = fit_stats(bundle.panel, splits.train)
    space = _SampleSpace(bundle, stats, lookback)

    train_i, train_t = space.day_range_samples(splits.train)
    val_i, val_t = space.day_range_samples(splits.validation)
    if train_i.size == 0 or val_i.size == 0:
        raise EmptyTrainingSet(
            f"no trainable samples in {splits.train}..{splits.validation} "
            f"with {lookback}-day look-back"
        )
    train_y = space.labels_for(train_i, train_t)
    val_x, val_dow = space.assemble(val_i, val_t)
    val_y = space.labels_for(val_i, val_t)

    if isinstance(init, ModelParams):
        if init.descriptor != cfg.arch:
            raise ArchitectureMismatch(
                f"init descriptor {init.descriptor} != config arch {cfg.arch}"
            )
        init_fn = lambda: init.copy()
    else:
        seed = cfg.seed if init is None else int(init)
        init_fn = lambda: init_params(cfg.arch, seed)

    lr_order = sorted(set(cfg.lr_grid))
    perms, digest = _batch_schedule(cfg, train_i.size, len(lr_order))
    history: list[EpochRecord] = []
    best: tuple[float, ModelParams, float, int] | None = None  # (f1, params, lr, epoch)

    for lr_idx, lr in enumerate(lr_order):
        params = init_fn()
        state = AdamState.zeros_like(params)
        f1_0 = _val_f1(params, val_x, val_dow, val_y)
        history.append(EpochRecord(lr, 0, float("nan"), f1_0))
        run_best = f1_0
        if best is None or f1_0 > best[0]:
            best = (f1_0, params.copy(), lr, 0)
        stale = 0
        for epoch in range(1, cfg.max_epochs + 1):
            perm = perms[lr_idx * cfg.max_epochs + (epoch - 1)]
            loss_sum = 0.0
            for lo in range(0, perm.size, cfg.batch_size):
                idx = perm[lo : lo + cfg.batch_size]
                x, dow = space.assemble(train_i[idx], train_t[idx])
                loss, grads = backward(params, (x, dow, train_y[idx]))
                params, state = adam_step(
                    params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps
                )
                loss_sum += loss * idx.size
            f1 = _val_f1(params, val_x, val_dow, val_y)
            history.append(EpochRecord(lr, epoch, loss_sum / perm.size, f1))
            if best is None or f1 > best[0]:
                best = (f1, params.copy(), lr, epoch)
            if f1 > run_best:
                run_best = f1
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break

    assert best is not None
    return TrainedModel(
        params=best[1],
        stats=stats,
        history=tuple(history),
        chosen_lr=best[2],
        chosen_epoch=best[3],
        crime_class=bundle.crime_class,
        batch_digest=digest,
    )


def train_model(
    ds: CityDataset,
    crime_class: str,
    splits: SplitWindows,
    cfg: TrainConfig,
    init: ModelParams | int | None = None,
) -> TrainedModel:
    """Build the city's feature tensors and run :func:`train_on_bundle`."""
    return train_on_bundle(make_bundle(ds, crime_class), splits, cfg, init)


def predict_month_on_bundle(
    model: TrainedModel, bundle: CityBundle, test_month: tuple[int, int]
) -> PredictionSet:
    lookback = model.params.descriptor.lookback_days
    space = _SampleSpace(bundle, model.stats, lookback)
    first, last = month_bounds(*test_month)
    panel = bundle.panel
    if first < panel.start or last > panel.end:
        raise InsufficientHistory(f"test month {test_month} not fully inside the panel")
    ti, tt = space.day_range_samples((first, last))
    n_expected = bundle.n_tracts * ((last - first).days + 1)
    if ti.size < n_expected:
        log.warning(
            "%s %s: %d leading (tract, day) pairs lack %d-day history and are omitted",
            bundle.city_name,
            test_month,
            n_expected - ti.size,
            lookback,
        )
    if ti.size == 0:
        raise InsufficientHistory(f"no predictable days in test month {test_month}")
    entries: dict[tuple[str, date], tuple[float, int]] = {}
    for lo in range(0, ti.size, PREDICT_BATCH):
        sl = slice(lo, lo + PREDICT_BATCH)
        x, dow = space.assemble(ti[sl], tt[sl])
        p = forward_batch(model.params, x, dow)
        for i, t, prob in zip(ti[sl], tt[sl], p):
            key = (panel.tract_ids[i], panel.start + timedelta(days=int(t)))
            entries[key] = (float(prob), int(prob >= 0.5))
    return PredictionSet(entries)


def predict_month(
    model: TrainedModel, ds: CityDataset, test_month: tuple[int, int]
) -> PredictionSet:
    """Next-day hotspot predictions for every tract and day of the month."""
    return predict_month_on_bundle(model, make_bundle(ds, model.crime_class), test_month)


def write_history_csv(model: TrainedModel, path) -> None:
    """Per-epoch training log: ``epoch,lr,train_loss,val_f1``."""
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss", "val_f1"])
        for rec in model.history:
            loss = "" if rec.train_loss != rec.train_loss else repr(rec.train_loss)
            w.writerow([rec.epoch, repr(rec.lr), loss, repr(rec.val_f1)])
