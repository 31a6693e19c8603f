"""``heartcast`` command line: synth, train, grid, report, validate-data."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from ._alloc import tune_allocator
from .attention import AttentionConfig
from .data import CsvSchema, SynthConfig, load_csv, synth_generate, write_csv
from .errors import HeartcastError
from .harness import DatasetEntry, ExperimentGrid, load_results, render_report, run_experiment, train_cell
from .training import TrainingConfig

log = logging.getLogger("heartcast")


def _read_config(path) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def cmd_synth(args) -> int:
    cfg = SynthConfig.from_dict(_read_config(args.config))
    panel = synth_generate(cfg, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(panel, out / "synth.csv")
    (out / "synth.json").write_text(json.dumps({"config": cfg.to_dict(), "seed": args.seed}, indent=1))
    print(f"wrote {out / 'synth.csv'}: {len(panel.stations)} stations, {len(panel.features)} features, "
          f"{panel.n_hours} hours")
    return 0


def cmd_validate(args) -> int:
    schema = CsvSchema(**_read_config(args.config))
    try:
        panel = load_csv(args.path, schema)
    except HeartcastError as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({
        "stations": list(panel.stations), "features": list(panel.features), "roles": list(panel.roles),
        "first_hour": str(panel.timestamps[0]), "last_hour": str(panel.timestamps[-1]),
        "hours": panel.n_hours, "values": panel.n_values,
    }, indent=1))
    return 0


def cmd_train(args) -> int:
    cfg = _read_config(args.config)
    base = Path(args.config).parent if args.config else None
    dataset = DatasetEntry.from_dict(cfg["dataset"], base)
    att = AttentionConfig.from_dict(cfg.get("attention", {}))
    training = TrainingConfig.from_dict(cfg.get("training", {}))
    seed = args.seed if args.seed is not None else training.seed
    model, hist, data = train_cell(dataset, att, seed, cfg.get("model", {}), training)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.npz", extra={"best_epoch": hist.best_epoch, "seed": seed})
    data.standardizer.save(out / "scaler.json")
    hist.to_csv(out / "history.csv")
    summary = {k: v for k, v in hist.summary().items() if k not in ("train_mse", "val_mse", "lr")}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary))
    return 0


def cmd_grid(args) -> int:
    grid = ExperimentGrid.from_json(args.config)
    if args.seed is not None:
        grid = ExperimentGrid.from_dict({**grid.to_dict(), "seeds": [args.seed]})
    summary = run_experiment(grid, args.out_dir, jobs=args.jobs, resume=args.resume)
    print(f"{len(summary.trained)} cells trained, {len(summary.skipped)} reused, "
          f"{len(summary.failures)} failed; results in {summary.out_dir}")
    for key, err in summary.failures.items():
        print(f"FAILED {key}: {err}", file=sys.stderr)
    return 0 if summary.ok else 1


def cmd_report(args) -> int:
    out = Path(args.out_dir)
    paths = render_report(load_results(out / "results.json"), out)
    print(paths["csv"].read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="heartcast", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic panel as CSV")
    s.add_argument("--config", help="SynthConfig JSON")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("validate-data", help="check a CSV file against the input schema")
    s.add_argument("path")
    s.add_argument("--config", help="CsvSchema JSON (column names, target, roles)")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("train", help="train a single model")
    s.add_argument("--config", required=True, help="JSON with dataset, attention, model, training")
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("grid", help="run an experiment grid")
    s.add_argument("--config", required=True, help="ExperimentGrid JSON")
    s.add_argument("--seed", type=int, help="replace the grid's seed list with this one seed")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    s.add_argument("--resume", action="store_true", help="skip cells already completed with the same config")
    s.set_defaults(func=cmd_grid)

    s = sub.add_parser("report", help="re-render tables and chart from results.json")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    tune_allocator()
    try:
        return args.func(args)
    except (HeartcastError, FileNotFoundError, json.JSONDecodeError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
