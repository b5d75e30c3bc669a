"""
Experiment grid: local models, pre-trained models with and without
fine-tuning, and the cross-system matrix of 35-week local models.

Every grid cell is an independent job whose random seed is derived from its
coordinates (variant, system, checkpoint, seed index), so results do not
depend on scheduling or on the number of worker processes.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import model as mdl
from .dataset import (
    CHECKPOINT_WEEKS,
    Examples,
    SplitSpec,
    extract_examples,
    extract_holdout,
    split_train,
    window,
)
from .tank_sim import HouseholdSeries, read_corpus

log = logging.getLogger(__name__)

VARIANTS = ("local", "ptm_small", "ptm_large", "ptm_small_ft", "ptm_large_ft")
PTM_VARIANTS = ("ptm_small", "ptm_large")
FT_VARIANTS = {"ptm_small_ft": "ptm_small", "ptm_large_ft": "ptm_large"}
_VARIANT_CODE = {v: i for i, v in enumerate(VARIANTS + ("cross",))}

# callables invoked in-process with (variant, system_ids, examples) for every fit;
# used to audit that no fit ever sees holdout data
FIT_AUDIT_HOOKS: list[Callable[[str, tuple[str, ...], Examples], None]] = []


@dataclass(frozen=True)
class ExperimentPlan:
    master_seed: int = 2023
    checkpoints: tuple[int, ...] = CHECKPOINT_WEEKS
    variants: tuple[str, ...] = VARIANTS
    n_seeds: int = 5
    source_weeks: int = 35  # 245 days, roughly 8 months
    cross_weeks: int = 35
    small_source_index: int = 0
    train: mdl.TrainConfig = field(default_factory=mdl.TrainConfig)
    finetune: mdl.FineTuneConfig = field(default_factory=mdl.FineTuneConfig)

    def __post_init__(self):
        if tuple(self.checkpoints) != CHECKPOINT_WEEKS:
            raise ValueError(f"checkpoints must be {CHECKPOINT_WEEKS}")
        if self.source_weeks != 35 or self.cross_weeks != 35:
            raise ValueError("source and cross-model windows are fixed at 35 weeks")
        unknown = set(self.variants) - set(VARIANTS)
        if unknown:
            raise ValueError(f"unknown variants: {sorted(unknown)}")
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")


@dataclass(frozen=True)
class ResultRow:
    variant: str
    system_id: str
    checkpoint_weeks: int | None
    seed: int
    mae: float | None
    note: str = ""


@dataclass(frozen=True)
class CrossMatrix:
    systems: tuple[str, ...]
    mae: np.ndarray  # rows: model's training system, columns: evaluated holdout

    def column_spread(self) -> np.ndarray:
        col_min = self.mae.min(axis=0)
        return (self.mae.max(axis=0) - col_min) / col_min

    def diagonal_rank(self) -> np.ndarray:
        """1-based rank of each system's own model within its holdout column."""
        diag = np.diag(self.mae)
        return np.array([1 + int(np.sum(self.mae[:, j] < diag[j])) for j in range(len(diag))])


def cell_seed(master_seed: int, variant: str, system_index: int, checkpoint: int, seed_index: int) -> int:
    ss = np.random.SeedSequence([master_seed, _VARIANT_CODE[variant], system_index, checkpoint, seed_index])
    return int(ss.generate_state(1)[0])


# --- data preparation -----------------------------------------------------

@dataclass
class PreparedCorpus:
    source_ids: tuple[str, ...]
    target_ids: tuple[str, ...]
    examples: dict[str, Examples]
    holdout: dict[str, Examples]


def prepare(source: list[HouseholdSeries], target: list[HouseholdSeries]) -> PreparedCorpus:
    examples = {s.household_id: extract_examples(s) for s in source + target}
    holdout = {s.household_id: extract_holdout(examples[s.household_id]) for s in target}
    return PreparedCorpus(
        tuple(s.household_id for s in source), tuple(s.household_id for s in target), examples, holdout
    )


def prepare_from_dir(corpus_dir: Path) -> tuple[dict, PreparedCorpus]:
    manifest, source, target = read_corpus(corpus_dir)
    return manifest, prepare(source, target)


def ptm_training_sets(plan: ExperimentPlan, data: PreparedCorpus) -> tuple[Examples, Examples]:
    """(small, large) pre-training sets, weeks [0, source_weeks) of source systems only."""
    sw = plan.source_weeks
    small_id = data.source_ids[plan.small_source_index]
    small = window(data.examples[small_id], 0, sw)
    large = Examples.concat([window(data.examples[s], 0, sw) for s in data.source_ids])
    return small, large


# --- jobs -----------------------------------------------------------------

_WORKER_DATA: dict = {}


def _init_worker(data: PreparedCorpus, plan: ExperimentPlan, ptms: dict | None = None) -> None:
    _WORKER_DATA["data"] = data
    _WORKER_DATA["plan"] = plan
    _WORKER_DATA["ptms"] = {k: mdl.from_dict(v) for k, v in (ptms or {}).items()}


def _audit(variant: str, systems: tuple[str, ...], ex: Examples) -> None:
    for hook in FIT_AUDIT_HOOKS:
        hook(variant, systems, ex)


def _run_job(job: tuple) -> tuple:
    data: PreparedCorpus = _WORKER_DATA["data"]
    plan: ExperimentPlan = _WORKER_DATA["plan"]
    kind = job[0]
    if kind == "ptm":
        _, variant, seed_index = job
        small, large = ptm_training_sets(plan, data)
        ex = large if variant == "ptm_large" else small
        systems = data.source_ids if variant == "ptm_large" else (data.source_ids[plan.small_source_index],)
        seed = cell_seed(plan.master_seed, variant, 0, 0, seed_index)
        _audit(variant, systems, ex)
        m = mdl.train(ex, _with_seed(plan.train, seed), _meta(variant, systems, None, seed_index, seed))
        return job, None, mdl.to_dict(m), ""
    if kind in ("local", "cross"):
        _, sys_idx, cp, seed_index = job
        sid = data.target_ids[sys_idx]
        variant = "local" if kind == "local" else "cross"
        ex = split_train(data.examples[sid], SplitSpec(cp))
        if len(ex) < 2:
            return job, None, None, f"{len(ex)} training examples before week {cp}"
        seed = cell_seed(plan.master_seed, variant, sys_idx, cp, seed_index)
        _audit(variant, (sid,), ex)
        m = mdl.train(ex, _with_seed(plan.train, seed), _meta(variant, (sid,), cp, seed_index, seed))
        if kind == "cross":
            row = np.array([mdl.evaluate_mae(m, data.holdout[t]) for t in data.target_ids])
            return job, row, mdl.to_dict(m), ""
        return job, mdl.evaluate_mae(m, data.holdout[sid]), mdl.to_dict(m), ""
    if kind == "ft":
        _, variant, sys_idx, cp, seed_index = job
        sid = data.target_ids[sys_idx]
        ex = split_train(data.examples[sid], SplitSpec(cp))
        if len(ex) == 0:
            return job, None, None, f"no training examples before week {cp}"
        base = _WORKER_DATA["ptms"][f"{FT_VARIANTS[variant]}/{seed_index}"]
        seed = cell_seed(plan.master_seed, variant, sys_idx, cp, seed_index)
        _audit(variant, (sid,), ex)
        m = mdl.fine_tune(base, ex, _with_seed(plan.train, seed), plan.finetune,
                          _meta(variant, (sid,), cp, seed_index, seed))
        return job, mdl.evaluate_mae(m, data.holdout[sid]), mdl.to_dict(m), ""
    raise ValueError(f"unknown job kind {kind!r}")


def _with_seed(cfg: mdl.TrainConfig, seed: int) -> mdl.TrainConfig:
    from dataclasses import replace

    return replace(cfg, seed=seed)


def _meta(variant, systems, cp, seed_index, seed) -> dict:
    return {
        "variant": variant,
        "source_households": list(systems),
        "checkpoint_weeks": cp,
        "seed_index": seed_index,
        "seed": seed,
    }


def _map_jobs(jobs: list[tuple], data, plan, ptms, n_workers: int) -> list[tuple]:
    if n_workers <= 1 or len(jobs) <= 1:
        _init_worker(data, plan, ptms)
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers, initializer=_init_worker, initargs=(data, plan, ptms)) as pool:
        return list(pool.map(_run_job, jobs, chunksize=1))


# --- tracks ---------------------------------------------------------------

@dataclass
class GridResult:
    rows: list[ResultRow]
    matrix: CrossMatrix | None
    models: dict[str, dict]  # relative file path -> serialized model
    missing: list[str]


def model_relpath(variant: str, system: str | None, cp: int | None, seed_index: int) -> str:
    if variant in PTM_VARIANTS:
        return f"{variant}/seed{seed_index}.json"
    if variant == "cross":
        return f"cross/{system}.json"
    return f"{variant}/{system}_w{cp:02d}_seed{seed_index}.json"


def train_ptms(plan: ExperimentPlan, data: PreparedCorpus, jobs: int = 1) -> dict[str, mdl.DynamicsModel]:
    """Pre-trained models keyed ``"<variant>/<seed index>"``."""
    job_list = [("ptm", v, s) for s in range(plan.n_seeds) for v in PTM_VARIANTS]
    out = _map_jobs(job_list, data, plan, None, jobs)
    return {f"{j[1]}/{j[2]}": mdl.from_dict(m) for j, _, m, _ in out}


def run_local_track(plan: ExperimentPlan, data: PreparedCorpus, jobs: int = 1) -> tuple[list[ResultRow], dict]:
    job_list = [
        ("local", i, cp, s)
        for i in range(len(data.target_ids))
        for cp in plan.checkpoints
        for s in range(plan.n_seeds)
    ]
    rows, models = [], {}
    for (_, i, cp, s), mae, m, note in _map_jobs(job_list, data, plan, None, jobs):
        sid = data.target_ids[i]
        rows.append(ResultRow("local", sid, cp, s, mae, note))
        if m is not None:
            models[model_relpath("local", sid, cp, s)] = m
    return rows, models


def run_ptm_track(
    plan: ExperimentPlan, data: PreparedCorpus, ptms: dict[str, mdl.DynamicsModel], jobs: int = 1
) -> tuple[list[ResultRow], dict]:
    rows, models = [], {}
    for variant in PTM_VARIANTS:
        if variant not in plan.variants:
            continue
        for sid in data.target_ids:
            for s in range(plan.n_seeds):
                mae = mdl.evaluate_mae(ptms[f"{variant}/{s}"], data.holdout[sid])
                rows.append(ResultRow(variant, sid, None, s, mae))
    job_list = [
        ("ft", v, i, cp, s)
        for v in FT_VARIANTS
        if v in plan.variants
        for i in range(len(data.target_ids))
        for cp in plan.checkpoints
        for s in range(plan.n_seeds)
    ]
    serial = {k: mdl.to_dict(m) for k, m in ptms.items()}
    for (_, v, i, cp, s), mae, m, note in _map_jobs(job_list, data, plan, serial, jobs):
        sid = data.target_ids[i]
        rows.append(ResultRow(v, sid, cp, s, mae, note))
        if m is not None:
            models[model_relpath(v, sid, cp, s)] = m
    return rows, models


def build_cross_matrix(plan: ExperimentPlan, data: PreparedCorpus, jobs: int = 1) -> tuple[CrossMatrix, dict]:
    """Each target system's 35-week local model evaluated on every target holdout."""
    job_list = [("cross", i, plan.cross_weeks, 0) for i in range(len(data.target_ids))]
    rows = [None] * len(job_list)
    models = {}
    for (_, i, _, _), row, m, note in _map_jobs(job_list, data, plan, None, jobs):
        if row is None:
            raise ValueError(f"cross model for {data.target_ids[i]} could not be trained: {note}")
        rows[i] = row
        models[model_relpath("cross", data.target_ids[i], None, 0)] = m
    return CrossMatrix(data.target_ids, np.vstack(rows)), models


def run_grid(plan: ExperimentPlan, data: PreparedCorpus, jobs: int = 1) -> GridResult:
    ptms = train_ptms(plan, data, jobs)
    models = {model_relpath(k.split("/")[0], None, None, int(k.split("/")[1])): mdl.to_dict(m) for k, m in ptms.items()}
    rows: list[ResultRow] = []
    if "local" in plan.variants:
        r, m = run_local_track(plan, data, jobs)
        rows += r
        models.update(m)
    r, m = run_ptm_track(plan, data, ptms, jobs)
    rows += r
    models.update(m)
    matrix, m = build_cross_matrix(plan, data, jobs)
    models.update(m)
    missing = [f"{r.variant}/{r.system_id}/w{r.checkpoint_weeks}/seed{r.seed}: {r.note}" for r in rows if r.mae is None]
    for msg in missing:
        log.warning("missing cell %s", msg)
    return GridResult(sort_rows(rows, plan.variants), matrix, models, missing)


# --- aggregation and output -----------------------------------------------

def sort_rows(rows: Iterable[ResultRow], variants: tuple[str, ...] = VARIANTS) -> list[ResultRow]:
    order = {v: i for i, v in enumerate(variants)}
    return sorted(rows, key=lambda r: (order[r.variant], r.system_id, r.checkpoint_weeks or 0, r.seed))


def _sd(values) -> float:
    return float(np.std(values)) if len(values) else float("nan")


def summarize(rows: list[ResultRow], plan: ExperimentPlan) -> dict:
    """Per variant and checkpoint: mean/sd over all cells plus the across-system and across-seed spreads.

    Checkpoint-free variants are replicated at every checkpoint.
    """
    out: dict = {"variants": {}, "checkpoints": list(plan.checkpoints), "n_seeds": plan.n_seeds}
    for variant in plan.variants:
        per_cp = {}
        for cp in plan.checkpoints:
            sel = [
                r for r in rows
                if r.variant == variant and r.mae is not None
                and (r.checkpoint_weeks is None or r.checkpoint_weeks == cp)
            ]
            by_sys: dict[str, list[float]] = {}
            for r in sel:
                by_sys.setdefault(r.system_id, []).append(r.mae)
            sys_means = [float(np.mean(v)) for _, v in sorted(by_sys.items())]
            sys_sds = [float(np.std(v)) for _, v in sorted(by_sys.items())]
            maes = [r.mae for r in sel]
            per_cp[str(cp)] = {
                "mean": float(np.mean(maes)) if maes else None,
                "sd": _sd(maes) if maes else None,
                "sd_across_systems": _sd(sys_means) if maes else None,
                "sd_across_seeds": float(np.mean(sys_sds)) if maes else None,
                "n": len(maes),
            }
        out["variants"][variant] = per_cp
    return out


def emit_results(rows: list[ResultRow], matrix: CrossMatrix, out_dir: Path, plan: ExperimentPlan,
                 models: dict[str, dict] | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = sort_rows(rows, plan.variants)
    with open(out_dir / "learning_curves.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("variant,system,checkpoint,seed,mae\n")
        for r in rows:
            cp = "" if r.checkpoint_weeks is None else str(r.checkpoint_weeks)
            mae = "" if r.mae is None else repr(float(r.mae))
            fh.write(f"{r.variant},{r.system_id},{cp},{r.seed},{mae}\n")
    with open(out_dir / "cross_matrix.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("model\\holdout," + ",".join(matrix.systems) + "\n")
        for sid, row in zip(matrix.systems, matrix.mae):
            fh.write(sid + "," + ",".join(repr(float(v)) for v in row) + "\n")
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summarize(rows, plan), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if models:
        for rel, doc in sorted(models.items()):
            path = out_dir / "models" / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(doc, fh, sort_keys=True)
                fh.write("\n")


def read_learning_curves(path: Path) -> list[ResultRow]:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                ResultRow(
                    rec["variant"], rec["system"],
                    int(rec["checkpoint"]) if rec["checkpoint"] else None,
                    int(rec["seed"]),
                    float(rec["mae"]) if rec["mae"] else None,
                )
            )
    return rows


def read_cross_matrix(path: Path) -> CrossMatrix:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        systems = tuple(header[1:])
        body = [row for row in reader]
    if tuple(r[0] for r in body) != systems:
        raise ValueError("cross matrix row and column labels differ")
    return CrossMatrix(systems, np.array([[float(v) for v in r[1:]] for r in body]))
