"""Command-line entry point wiring generation, training, and experiments.

Subcommands::

    synth       generate a synthetic city family on disk
    train       train one model (baseline, source pretrain, or fine-tune)
    experiment  run the full scarcity-by-source matrix and emit reports
    gradcheck   finite-difference audit of the gradient engine

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.
Every command prints the manifest it wrote; the manifest plus the config
document reproduce the run exactly.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import CONFIG_ENV_VAR, RunConfig, load_run_config, _parse_month
from .domain import CRIME_CLASSES, CityDataset
from .errors import ArchitectureMismatch, DataError, HotspotError, NumericError
from .evaluation import emit_report, run_matrix
from .ingest import load_city
from .net import StatsBlock, gradcheck_suite, load_params, save_params
from .synthgen import FamilyParams, write_family
from .training import make_splits, train_model, write_history_csv

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse with the documented usage exit code (1, not argparse's 2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def dataset_fingerprint(ds: CityDataset) -> str:
    """Content hash of a dataset, independent of record ordering."""
    h = hashlib.sha256()
    h.update(f"{ds.city_name}|{ds.period[0]}|{ds.period[1]}".encode())
    for t in ds.tracts:
        h.update(f"T|{t.id}|{t.centroid_x!r}|{t.centroid_y!r}".encode())
    for ev in sorted(ds.crimes, key=lambda e: (e.date, e.tract_id, e.category)):
        h.update(f"C|{ev.date}|{ev.tract_id}|{ev.category}".encode())
    for r in sorted(
        ds.od_flows,
        key=lambda r: (r.date, str(r.origin), str(r.dest), r.volume),
    ):
        h.update(f"F|{r.date}|{r.origin}|{r.dest}|{r.volume!r}".encode())
    return h.hexdigest()


def _write_manifest(out_dir: Path, doc: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")
    return path


def cmd_synth(args, parser: _Parser) -> int:
    if args.cities < 2:
        parser.error("--cities must be >= 2 (a family needs sources and a target)")
    params = FamilyParams(
        n_cities=args.cities,
        tracts_per_city=args.tracts,
        months=args.months,
        divergence=args.divergence,
    )
    paths = write_family(params, args.seed, args.out)
    print(paths[-1])
    return EXIT_OK


def _load_family(family_dir: Path, cfg: RunConfig) -> list[CityDataset]:
    city_dirs = sorted(
        p for p in family_dir.iterdir() if p.is_dir() and (p / "tracts.csv").exists()
    )
    if not city_dirs:
        raise DataError(f"{family_dir}: no city directories with tracts.csv found")
    return [load_city(p.name, p, cfg.ingest) for p in city_dirs]


def cmd_train(args, parser: _Parser) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    city_dir = Path(args.city)
    ds = load_city(city_dir.name, city_dir, cfg.ingest)
    test_month = _parse_month(args.test_month)
    splits = make_splits(test_month, args.months, ds.period)

    init = None
    if args.init:
        try:
            init, _, _ = load_params(args.init, expected=cfg.train.arch)
        except ArchitectureMismatch:
            found, _, _ = load_params(args.init)
            print(
                "architecture mismatch:\n"
                f"  weights file: {found.descriptor}\n"
                f"  configured:   {cfg.train.arch}",
                file=sys.stderr,
            )
            raise

    model = train_model(ds, args.crime_class, splits, cfg.train, init)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    weights_path = out / "weights.json"
    save_params(
        model.params,
        weights_path,
        stats=StatsBlock(tuple(model.stats.mean), tuple(model.stats.sd)),
        metadata={
            "crime_class": model.crime_class,
            "city": ds.city_name,
            "test_month": args.test_month,
            "months": args.months,
            "chosen_lr": model.chosen_lr,
            "chosen_epoch": model.chosen_epoch,
            "fine_tuned_from": args.init or None,
        },
    )
    write_history_csv(model, out / "history.csv")
    manifest = _write_manifest(
        out,
        {
            "command": "train",
            "city": ds.city_name,
            "city_fingerprint": dataset_fingerprint(ds),
            "crime_class": args.crime_class,
            "test_month": args.test_month,
            "months": args.months,
            "init": args.init or None,
            "chosen_lr": model.chosen_lr,
            "chosen_epoch": model.chosen_epoch,
            "best_val_f1": model.best_val_f1,
            "batch_digest": model.batch_digest,
            "weights_checksum": model.params.checksum(),
            "effective_config": cfg.to_dict(),
        },
    )
    print(manifest)
    return EXIT_OK


def cmd_experiment(args, parser: _Parser) -> int:
    cfg = load_run_config(args.config)
    overrides = {}
    if args.crime_class:
        overrides["crime_class"] = args.crime_class
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    if args.k_values:
        overrides["k_values"] = tuple(int(x) for x in args.k_values.split(","))
    if args.test_months:
        overrides["test_months"] = tuple(
            _parse_month(x) for x in args.test_months.split(",")
        )
    if overrides:
        cfg = replace(cfg, **overrides)

    family_dir = Path(args.family)
    datasets = _load_family(family_dir, cfg)
    result = run_matrix(datasets, args.target, cfg.crime_class, cfg.matrix())
    result.manifest["effective_config"] = cfg.to_dict()
    result.manifest["inputs"] = {
        ds.city_name: dataset_fingerprint(ds) for ds in datasets
    }
    written = emit_report(result, args.out)
    for path in written:
        print(path)
    return EXIT_OK


def cmd_gradcheck(args, parser: _Parser) -> int:
    reports = gradcheck_suite(seed=args.seed)
    worst = max(reports, key=lambda r: r.max_rel_error)
    for i, rep in enumerate(reports):
        print(f"model {i}: max_rel_error={rep.max_rel_error:.3e}")
        for key, err in rep.per_layer.items():
            print(f"  {key:10s} {err:.3e}")
    print(
        f"worst: {worst.max_rel_error:.3e} at {worst.worst_key}{list(worst.worst_index)}"
    )
    if not all(r.passed for r in reports):
        raise NumericError(
            f"gradient check failed: {worst.max_rel_error:.3e} >= 1e-4 "
            f"at {worst.worst_key}{list(worst.worst_index)}"
        )
    print("gradient check passed")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="hotspot-transfer", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic city family")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cities", type=int, default=4)
    p.add_argument("--tracts", type=int, default=40)
    p.add_argument("--months", type=int, default=12)
    p.add_argument("--divergence", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a single model")
    p.add_argument("--city", required=True, help="directory with the three CSVs")
    p.add_argument("--crime-class", choices=CRIME_CLASSES, default="property")
    p.add_argument("--test-month", required=True, help="YYYY-MM")
    p.add_argument("--months", type=int, default=7, help="training window length k")
    p.add_argument("--config", default=None, help=f"JSON config (default ${CONFIG_ENV_VAR})")
    p.add_argument("--init", default=None, help="weights file to fine-tune from")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("experiment", help="run the transfer experiment matrix")
    p.add_argument("--family", required=True, help="directory of city subdirectories")
    p.add_argument("--target", default=None, help="run only this target city")
    p.add_argument("--crime-class", choices=CRIME_CLASSES, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--k-values", default=None, help="comma-separated k list")
    p.add_argument("--test-months", default=None, help="comma-separated YYYY-MM list")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args, parser)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, HotspotError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
