"""Strict JSON run configuration; every knob of the pipeline in one document."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import control, experiments
from . import model as mdl
from . import tank_sim


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TankSection(_Strict):
    n_layers: int = 10
    volume: float = 200.0
    ua_loss: float = 2.0
    k_cond: float = 0.8
    t_ambient: float = 18.0
    t_inlet: float = 12.0
    heater_power: float = 2000.0
    dt: float = 900.0


class CorpusSection(_Strict):
    n_source: int = Field(8, ge=1)
    n_target: int = Field(16, ge=1)
    n_days: int = Field(365, ge=1)
    tank: TankSection = TankSection()
    base_draw_rate: tuple[float, ...] = tank_sim.BASE_DRAW_RATE
    rate_scale_range: tuple[float, float] = (0.5, 1.6)
    volume_mean_range: tuple[float, float] = (5.0, 12.0)
    volume_sd_fraction: float = Field(0.4, ge=0)
    t_low: float = 42.0
    t_high: float = 58.0
    setpoint_jitter: float = Field(2.0, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if self.t_low >= self.t_high:
            raise ValueError(f"t_low ({self.t_low}) must be below t_high ({self.t_high})")
        if len(self.base_draw_rate) != 24 or min(self.base_draw_rate) < 0:
            raise ValueError("base_draw_rate needs 24 non-negative hourly rates")
        for name in ("rate_scale_range", "volume_mean_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} must satisfy 0 < low <= high")
        lo = self.t_low - self.setpoint_jitter
        hi = self.t_high + self.setpoint_jitter
        if lo < 30 or hi > 70:
            raise ValueError("jittered setpoints must stay within [30, 70] degC")
        # jitter is applied independently, so the bands may not cross
        if self.t_low + self.setpoint_jitter >= self.t_high - self.setpoint_jitter:
            raise ValueError("setpoint jitter lets t_low reach t_high")
        return self


class TrainSection(_Strict):
    h1: int = Field(32, ge=1)
    h2: int = Field(32, ge=1)
    lr: float = Field(1e-3, gt=0, lt=1)
    epochs: int = Field(400, ge=0)
    batch_size: int = Field(64, ge=1)
    l2_lambda: float = Field(1e-4, ge=0)


class FineTuneSection(_Strict):
    lr_scale: float = Field(0.1, ge=0, lt=1)
    epoch_scale: float = Field(0.2, ge=0, lt=1)
    freeze_norm: bool = True


class PlanSection(_Strict):
    checkpoints: tuple[int, ...] = (4, 8, 16, 32)
    variants: tuple[str, ...] = experiments.VARIANTS
    n_seeds: int = Field(5, ge=1)
    source_weeks: int = 35
    small_source_index: int = Field(0, ge=0)


class ControlSection(_Strict):
    days: tuple[int, ...] = (322,)
    horizon_slots: int = Field(96, ge=1)
    t_comfort: float = Field(40.0, ge=30, le=60)
    forecast: Literal["perfect", "profile_mean"] = "perfect"
    max_violation_slots: int = Field(2, ge=0)
    lookahead: int = Field(control.DEFAULT_LOOKAHEAD, ge=1)
    exhaustive_max_slots: int = Field(control.DEFAULT_EXHAUSTIVE_MAX_SLOTS, ge=0)
    seed_index: int = Field(0, ge=0)


class RunConfig(_Strict):
    master_seed: int = Field(2023, ge=0)
    output_dir: str = "run"
    corpus: CorpusSection = CorpusSection()
    train: TrainSection = TrainSection()
    finetune: FineTuneSection = FineTuneSection()
    plan: PlanSection = PlanSection()
    control: ControlSection = ControlSection()

    @model_validator(mode="after")
    def _check(self):
        if self.plan.small_source_index >= self.corpus.n_source:
            raise ValueError("small_source_index must index a source household")
        if self.control.seed_index >= self.plan.n_seeds:
            raise ValueError("control seed_index must be below plan.n_seeds")
        return self

    # --- conversions to the library's dataclasses ---

    def tank_config(self) -> tank_sim.TankConfig:
        return tank_sim.TankConfig(**self.corpus.tank.model_dump())

    def corpus_config(self) -> tank_sim.CorpusConfig:
        c = self.corpus.model_dump(exclude={"tank"})
        return tank_sim.CorpusConfig(master_seed=self.master_seed, tank=self.tank_config(), **c)

    def experiment_plan(self) -> experiments.ExperimentPlan:
        p = self.plan.model_dump()
        return experiments.ExperimentPlan(
            master_seed=self.master_seed,
            train=mdl.TrainConfig(**self.train.model_dump()),
            finetune=mdl.FineTuneConfig(**self.finetune.model_dump()),
            cross_weeks=p["source_weeks"],
            **p,
        )

    def study_config(self) -> control.StudyConfig:
        c = self.control.model_dump()
        models = tuple(
            (v, None if v in experiments.PTM_VARIANTS else cp)
            for v, cp in control.StudyConfig().models
            if v in self.plan.variants
        )
        return control.StudyConfig(models=models, **c)


def load_config(path: str | Path | None) -> RunConfig:
    """Parse a config file; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return RunConfig.model_validate(doc)
