"""Monthly F1 metrics, the transfer experiment matrix, and report emission.

F1 is pooled (micro) over every (tract, day) pair of a month. The headline
comparison is the relative change of the k-month fine-tuned (or voting)
model's average monthly F1 against the scarcity baseline trained on the same
window: ``(f1_transfer / f1_baseline - 1) * 100``.

``run_matrix`` executes, for each target city, scarcity level k, and test
month: one baseline, one fine-tuned model per source city, and the majority
vote of the fine-tuned models. Cells are independent jobs keyed by
deterministic seeds derived from the master seed, so a recorded manifest
reproduces every number exactly.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import date

import multiprocessing as mp

import numpy as np

from .domain import CityDataset, add_months, month_bounds
from .errors import EmptyDomain, InvalidF1
from .features import HotspotLabels
from .net import ModelParams
from .training import (
    CityBundle,
    PredictionSet,
    TrainConfig,
    make_bundle,
    pooled_f1,
    predict_month_on_bundle,
    train_on_bundle,
)
from .transfer import VotingEnsemble, fine_tune, majority_vote, pretrain_source, train_baseline

log = logging.getLogger(__name__)

VOTING = "voting"
BASELINE = "baseline"


@dataclass(frozen=True)
class MonthlyF1:
    month: tuple[int, int]
    tp: int
    fp: int
    fn: int
    tn: int
    f1: float


def f1_month(preds: PredictionSet, truth: HotspotLabels, month: tuple[int, int]) -> MonthlyF1:
    """Pooled confusion counts and F1 over the month's (tract, day) pairs.

    With no true and no predicted positives the month counts as perfect
    agreement (F1 = 1) and a warning is logged.
    """
    first, last = month_bounds(*month)
    index = {t: i for i, t in enumerate(truth.tract_ids)}
    tp = fp = fn = tn = 0
    for (tract_id, d), (_, label) in preds.entries.items():
        if not (first <= d <= last):
            continue
        actual = int(truth.labels[index[tract_id], (d - truth.start).days])
        if label and actual:
            tp += 1
        elif label and not actual:
            fp += 1
        elif actual:
            fn += 1
        else:
            tn += 1
    if tp + fp + fn + tn == 0:
        raise EmptyDomain(f"no predictions fall inside month {month}")
    if tp == 0 and fp == 0 and fn == 0:
        log.warning("month %s has no positives anywhere; F1 degenerates to 1", month)
    return MonthlyF1(month, tp, fp, fn, tn, pooled_f1(tp, fp, fn))


def avg_monthly_f1(monthlies) -> float:
    """Unweighted mean F1 over test months; accepts MonthlyF1 rows or floats."""
    values = [m.f1 if isinstance(m, MonthlyF1) else float(m) for m in monthlies]
    if not values:
        raise EmptyDomain("average over zero months")
    return sum(values) / len(values)


def relative_change(f1_transfer: float, f1_baseline: float) -> float | None:
    """Percent change vs. baseline; ``None`` (undefined) when baseline is 0."""
    if f1_transfer < 0 or f1_baseline < 0:
        raise InvalidF1(f"negative F1 inputs ({f1_transfer}, {f1_baseline})")
    if f1_baseline == 0:
        return None
    return (f1_transfer / f1_baseline - 1.0) * 100.0


@dataclass(frozen=True)
class ResultRow:
    target: str
    crime_class: str
    variant: str  # BASELINE, VOTING, or a source city name
    k: int
    test_month: tuple[int, int]
    f1: float


@dataclass
class RelativeChangeTable:
    #: (target, variant, k) -> percent change vs. baseline, None when undefined
    rows: dict[tuple[str, str, int], float | None] = field(default_factory=dict)


@dataclass
class ExperimentResult:
    crime_class: str
    results: list[ResultRow]
    table: RelativeChangeTable
    #: (target, variant, k) -> average monthly F1 (baseline included)
    curves: dict[tuple[str, str, int], float]
    manifest: dict


@dataclass(frozen=True)
class MatrixConfig:
    train: TrainConfig = TrainConfig()
    k_values: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7)
    #: explicit (year, month) test months, or None for the final five full months
    test_months: tuple[tuple[int, int], ...] | None = None
    master_seed: int = 0
    jobs: int = 1


def default_test_months(period: tuple[date, date], count: int = 5) -> tuple[tuple[int, int], ...]:
    """The final ``count`` full calendar months of the study period."""
    months = []
    y, m = period[0].year, period[0].month
    while (y, m) <= (period[1].year, period[1].month):
        first, last = month_bounds(y, m)
        if first >= period[0] and last <= period[1]:
            months.append((y, m))
        y, m = add_months(y, m, 1)
    if len(months) < count:
        raise EmptyDomain(f"period {period} holds only {len(months)} full months")
    return tuple(months[-count:])


def _job_seed(master_seed: int, *key: int) -> int:
    return int(np.random.SeedSequence((master_seed, *key)).generate_state(1)[0])


# --- worker-side execution -------------------------------------------------------
#
# Jobs run either inline or in spawned worker processes. Workers receive the
# per-city bundles once through the pool initializer; job payloads carry only
# small arrays and keys.

_WORKER: dict = {}


def _pool_init(bundles: dict[str, CityBundle], train_cfg: TrainConfig):
    _WORKER["bundles"] = bundles
    _WORKER["train"] = train_cfg


def _pretrain_job(args: tuple) -> tuple:
    city, month, seed = args
    bundle = _WORKER["bundles"][city]
    cfg = replace(_WORKER["train"], seed=seed)
    model = pretrain_source(bundle, bundle.crime_class, month, cfg)
    return (
        city,
        month,
        {k: v for k, v in model.params.weights.items()},
        model.chosen_lr,
        model.chosen_epoch,
        model.params.checksum(),
    )


def _cell_job(args: tuple) -> tuple:
    target, variant, k, month, seed, source_weights = args
    bundle = _WORKER["bundles"][target]
    cfg = replace(_WORKER["train"], seed=seed)
    if variant == BASELINE:
        model = train_baseline(bundle, bundle.crime_class, k, month, cfg)
        checksum = None
    else:
        params = ModelParams(cfg.arch, source_weights)
        run = fine_tune(params, bundle, bundle.crime_class, k, month, cfg, source_city=variant)
        model = run.fine_tuned
        checksum = run.source_checksum
    preds = predict_month_on_bundle(model, bundle, month)
    monthly = f1_month(preds, bundle.labels, month)
    return (
        target,
        variant,
        k,
        month,
        monthly,
        preds.entries,
        model.chosen_lr,
        model.chosen_epoch,
        checksum,
    )


def _run_jobs(fn, jobs: list, n_workers: int, bundles, train_cfg):
    if not jobs:
        return []
    if n_workers <= 1 or len(jobs) == 1:
        _pool_init(bundles, train_cfg)
        return [fn(j) for j in jobs]
    # Single-threaded BLAS inside workers; the pool provides the parallelism.
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")
    ctx = mp.get_context("spawn")
    with ProcessPoolExecutor(
        max_workers=n_workers,
        mp_context=ctx,
        initializer=_pool_init,
        initargs=(bundles, train_cfg),
    ) as pool:
        return list(pool.map(fn, jobs))


def run_matrix(
    family: list[CityDataset] | dict[str, CityBundle],
    target: str | None,
    crime_class: str,
    cfg: MatrixConfig,
) -> ExperimentResult:
    """Full scarcity-by-source experiment for one crime class.

    ``family`` is a list of datasets sharing a study period (or prebuilt
    bundles). With ``target=None`` every city rotates through the target
    role, the others serving as sources.
    """
    if isinstance(family, dict):
        bundles = family
    else:
        bundles = {ds.city_name: make_bundle(ds, crime_class) for ds in family}
    if len(bundles) < 2:
        raise EmptyDomain("family must hold at least 2 cities")
    periods = {b.period for b in bundles.values()}
    if len(periods) != 1:
        raise EmptyDomain(f"family cities must share a study period, got {periods}")
    period = next(iter(periods))
    city_names = sorted(bundles)
    targets = [target] if target else city_names
    for t in targets:
        if t not in bundles:
            raise EmptyDomain(f"unknown target city {t!r}")
    test_months = cfg.test_months or default_test_months(period)
    k_values = tuple(cfg.k_values)

    month_idx = {m: i for i, m in enumerate(test_months)}
    city_idx = {c: i for i, c in enumerate(city_names)}

    # Stage A: one pretrained source model per (source city, test month).
    needed_sources = sorted(
        {s for t in targets for s in city_names if s != t}
    )
    pre_jobs = [
        (s, m, _job_seed(cfg.master_seed, 0, city_idx[s], month_idx[m]))
        for s in needed_sources
        for m in test_months
    ]
    pre_results = _run_jobs(_pretrain_job, pre_jobs, cfg.jobs, bundles, cfg.train)
    source_models: dict[tuple[str, tuple[int, int]], dict] = {}
    manifest_jobs: dict[str, dict] = {}
    for city, month, weights, lr, epoch, checksum in pre_results:
        source_models[(city, month)] = weights
        manifest_jobs[f"pretrain/{city}/{month[0]}-{month[1]:02d}"] = {
            "seed": _job_seed(cfg.master_seed, 0, city_idx[city], month_idx[month]),
            "chosen_lr": lr,
            "chosen_epoch": epoch,
            "checksum": checksum,
        }

    # Stage B: baselines and fine-tunes per (target, k, month).
    cell_jobs = []
    for t in targets:
        sources = [s for s in city_names if s != t]
        for k in k_values:
            for m in test_months:
                cell_jobs.append(
                    (t, BASELINE, k, m, _job_seed(cfg.master_seed, 1, city_idx[t], 0, k, month_idx[m]), None)
                )
                for s in sources:
                    cell_jobs.append(
                        (
                            t,
                            s,
                            k,
                            m,
                            _job_seed(cfg.master_seed, 2, city_idx[t], city_idx[s], k, month_idx[m]),
                            source_models[(s, m)],
                        )
                    )
    cell_results = _run_jobs(_cell_job, cell_jobs, cfg.jobs, bundles, cfg.train)

    by_cell: dict[tuple[str, str, int, tuple[int, int]], tuple[MonthlyF1, dict]] = {}
    for tgt, variant, k, month, monthly, entries, lr, epoch, checksum in cell_results:
        by_cell[(tgt, variant, k, month)] = (monthly, entries)
        rec = {
            "seed": _job_seed(
                cfg.master_seed,
                1 if variant == BASELINE else 2,
                city_idx[tgt],
                0 if variant == BASELINE else city_idx[variant],
                k,
                month_idx[month],
            ),
            "chosen_lr": lr,
            "chosen_epoch": epoch,
        }
        if checksum is not None:
            rec["source_checksum"] = checksum
        manifest_jobs[f"{variant}/{tgt}/k{k}/{month[0]}-{month[1]:02d}"] = rec

    # Voting per (target, k, month) from the fine-tuned members.
    results: list[ResultRow] = []
    curves: dict[tuple[str, str, int], float] = {}
    table = RelativeChangeTable()
    for t in sorted(targets):
        sources = [s for s in city_names if s != t]
        truth = bundles[t].labels
        for k in k_values:
            per_variant_f1: dict[str, list[float]] = {BASELINE: [], VOTING: []}
            for s in sources:
                per_variant_f1[s] = []
            for m in test_months:
                base_monthly, _ = by_cell[(t, BASELINE, k, m)]
                per_variant_f1[BASELINE].append(base_monthly.f1)
                results.append(ResultRow(t, crime_class, BASELINE, k, m, base_monthly.f1))
                member_preds = []
                for s in sources:
                    monthly, entries = by_cell[(t, s, k, m)]
                    per_variant_f1[s].append(monthly.f1)
                    results.append(ResultRow(t, crime_class, s, k, m, monthly.f1))
                    member_preds.append(PredictionSet(entries))
                if len(member_preds) >= 2:
                    voted = majority_vote(VotingEnsemble(tuple(member_preds)))
                else:
                    voted = member_preds[0]
                vote_monthly = f1_month(voted, truth, m)
                per_variant_f1[VOTING].append(vote_monthly.f1)
                results.append(ResultRow(t, crime_class, VOTING, k, m, vote_monthly.f1))
            base_avg = avg_monthly_f1(per_variant_f1[BASELINE])
            curves[(t, BASELINE, k)] = base_avg
            for variant in [*sources, VOTING]:
                avg = avg_monthly_f1(per_variant_f1[variant])
                curves[(t, variant, k)] = avg
                table.rows[(t, variant, k)] = relative_change(avg, base_avg)

    manifest = {
        "crime_class": crime_class,
        "master_seed": cfg.master_seed,
        "k_values": list(k_values),
        "test_months": [f"{y}-{m:02d}" for (y, m) in test_months],
        "targets": sorted(targets),
        "cities": city_names,
        "train_config": _train_config_dict(cfg.train),
        "jobs": manifest_jobs,
    }
    return ExperimentResult(crime_class, results, table, curves, manifest)


def _train_config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["lr_grid"] = list(cfg.lr_grid)
    return d


# --- report emission ----------------------------------------------------------------


def emit_report(
    result: ExperimentResult | None,
    out_dir,
    formats: tuple[str, ...] = ("csv", "svg"),
) -> list[str]:
    """Write results.csv, table.csv, manifest.json, and one SVG per target.

    An empty result yields header-only CSVs and no charts. Returns the paths
    written.
    """
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[str] = []

    rows = result.results if result else []
    if "csv" in formats:
        path = out / "results.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["target", "crime_class", "variant", "k", "test_month", "f1"])
            for r in rows:
                w.writerow(
                    [r.target, r.crime_class, r.variant, r.k, f"{r.test_month[0]}-{r.test_month[1]:02d}", repr(r.f1)]
                )
        written.append(str(path))

        path = out / "table.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["target", "crime_class", "variant", "k", "rel_change_pct"])
            if result:
                for (tgt, variant, k), pct in sorted(result.table.rows.items()):
                    w.writerow(
                        [tgt, result.crime_class, variant, k, "" if pct is None else repr(pct)]
                    )
        written.append(str(path))

    if result:
        path = out / "manifest.json"
        path.write_text(json.dumps(result.manifest, indent=1, sort_keys=True), encoding="utf-8")
        written.append(str(path))

    if "svg" in formats and result and result.results:
        written.extend(_emit_curves_svg(result, out))
    return written


def _emit_curves_svg(result: ExperimentResult, out) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    targets = sorted({t for (t, _, _) in result.curves})
    paths = []
    for target in targets:
        variants = sorted({v for (t, v, _) in result.curves if t == target})
        # baseline last so it sits on top of the legend order used in prose
        variants = [v for v in variants if v not in (BASELINE, VOTING)] + [VOTING, BASELINE]
        ks = sorted({k for (t, _, k) in result.curves if t == target})
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        for variant in variants:
            ys = [result.curves.get((target, variant, k)) for k in ks]
            ax.plot(ks, ys, marker="o", label=variant)
        ax.set_xlabel("months of target-city data (k)")
        ax.set_ylabel("average monthly F1")
        ax.set_title(f"{target} / {result.crime_class}")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out / f"f1_curves_{target}_{result.crime_class}.svg"
        fig.savefig(path)
        plt.close(fig)
        paths.append(str(path))
    return paths
