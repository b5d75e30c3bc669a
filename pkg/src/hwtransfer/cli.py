"""Command-line entry point: ``simulate``, ``experiment``, ``control``, ``report``.

Everything lands under one output directory::

    <out>/corpus/                 simulated households + corpus.json
    <out>/learning_curves.csv     per-cell holdout MAE
    <out>/cross_matrix.csv        35-week local models x target holdouts
    <out>/summary.json            per-variant per-checkpoint aggregates
    <out>/models/                 one JSON file per trained model
    <out>/control_outcomes.csv    per (variant, system, day) schedule scores
    <out>/control_summary.json    usable-system counts, energy above oracle
    <out>/fig2_data.csv, fig3_data.csv

Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 runtime fault.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from . import control, experiments
from .config import RunConfig, load_config
from .tank_sim import generate_corpus, read_corpus, write_corpus

log = logging.getLogger("hwtransfer")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_FAULT = 0, 2, 3, 4


class MissingPrerequisite(Exception):
    pass


def _resolve(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"master_seed": args.seed})
        cfg = RunConfig.model_validate(cfg.model_dump())
    out = Path(args.out) if args.out else Path(cfg.output_dir)
    return cfg, out


def _json_normal(obj):
    return json.loads(json.dumps(obj))


def _load_corpus(cfg: RunConfig, out: Path):
    corpus_dir = out / "corpus"
    if not (corpus_dir / "corpus.json").exists():
        raise MissingPrerequisite(f"no corpus at {corpus_dir}; run `simulate` first")
    manifest, source, target = read_corpus(corpus_dir)
    if manifest["config"] != _json_normal(cfg.corpus_config().to_dict()):
        raise MissingPrerequisite(f"corpus at {corpus_dir} was generated from a different config")
    return manifest, source, target


def cmd_simulate(cfg: RunConfig, out: Path, jobs: int) -> int:
    corpus = generate_corpus(cfg.corpus_config(), jobs=jobs)
    write_corpus(corpus, out / "corpus")
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.model_dump(mode="json"), fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("wrote %d households to %s", len(corpus.source) + len(corpus.target), out / "corpus")
    return EXIT_OK


def cmd_experiment(cfg: RunConfig, out: Path, jobs: int) -> int:
    _, source, target = _load_corpus(cfg, out)
    plan = cfg.experiment_plan()
    data = experiments.prepare(source, target)
    grid = experiments.run_grid(plan, data, jobs=jobs)
    experiments.emit_results(grid.rows, grid.matrix, out, plan, grid.models)
    if grid.missing:
        log.warning("%d grid cells missing (see learning_curves.csv)", len(grid.missing))
    log.info("wrote results to %s", out)
    return EXIT_OK


def cmd_control(cfg: RunConfig, out: Path, jobs: int) -> int:
    _, _, target = _load_corpus(cfg, out)
    if not (out / "models").is_dir():
        raise MissingPrerequisite(f"no models under {out / 'models'}; run `experiment` first")
    sc = cfg.study_config()
    rows = control.run_control_study(cfg.tank_config(), [s.profile for s in target], out / "models", sc, jobs)
    control.write_study_csv(rows, out / "control_outcomes.csv")
    with open(out / "control_summary.json", "w", encoding="utf-8") as fh:
        json.dump(control.study_summary(rows), fh, indent=2, sort_keys=True)
        fh.write("\n")
    warnings = [r for r in rows if r.outcome is None]
    for r in warnings:
        log.warning("%s/%s day %d: %s", r.variant, r.system_id, r.day, r.note)
    if warnings:
        print(f"{len(warnings)} warning(s): control rows without a model", file=sys.stderr)
    return EXIT_OK


def cmd_report(out: Path) -> int:
    summary_path, matrix_path = out / "summary.json", out / "cross_matrix.csv"
    for p in (summary_path, matrix_path):
        if not p.exists():
            raise MissingPrerequisite(f"missing {p}; run `experiment` first")
    with open(summary_path, encoding="utf-8") as fh:
        summary = json.load(fh)
    cols = ("mean", "sd", "sd_across_systems", "sd_across_seeds", "n")
    with open(out / "fig2_data.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("variant,checkpoint," + ",".join(cols) + "\n")
        for variant, per_cp in summary["variants"].items():
            for cp in summary["checkpoints"]:
                cell = per_cp[str(cp)]
                vals = ["" if cell[c] is None else repr(cell[c]) for c in cols]
                fh.write(f"{variant},{cp}," + ",".join(vals) + "\n")
    matrix = experiments.read_cross_matrix(matrix_path)
    with open(out / "fig3_data.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("model_system,holdout_system,mae\n")
        for i, src in enumerate(matrix.systems):
            for j, dst in enumerate(matrix.systems):
                fh.write(f"{src},{dst},{float(matrix.mae[i, j])!r}\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hwtransfer", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("simulate", "generate the household corpus"),
        ("experiment", "train and evaluate the model grid"),
        ("control", "run the reheat-scheduling study"),
        ("report", "write plot-ready data files"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON run config (defaults when omitted)")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument("--seed", type=int, help="override master_seed")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.jobs < 1:
            raise ValueError("--jobs must be >= 1")
        cfg, out = _resolve(args)
    except (ValidationError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "simulate":
            return cmd_simulate(cfg, out, args.jobs)
        if args.command == "experiment":
            return cmd_experiment(cfg, out, args.jobs)
        if args.command == "control":
            return cmd_control(cfg, out, args.jobs)
        return cmd_report(out)
    except MissingPrerequisite as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - reported as a runtime fault
        log.debug("runtime fault", exc_info=True)
        print(f"runtime fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
