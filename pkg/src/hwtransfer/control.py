"""
Comfort-constrained reheat scheduling on top of a dynamics model.

A schedule is one heat-pump on/off decision per quarter-hour slot. Its cost
is the heater energy (proportional to the number of on-slots) and it is
feasible when the mid-point temperature stays at or above ``t_comfort`` in
every slot.

Two kinds of predictor can drive the search. Both expose the same rollout
interface (``start`` / ``advance``) and are causal: the prediction for slot
``s`` depends only on decisions ``0..s``.

* :class:`AnchorPredictor` wraps a learned :class:`DynamicsModel`. It tracks
  the virtual reheat anchor (elapsed time, cumulative draw, anchor
  temperature) and queries the network. A heating run resets the anchor to
  ``t_high`` when it ends, provided the run delivered the estimated reheat
  energy. Until then the model keeps predicting the idle decay, so the
  credit for heating arrives only when the run is complete.
* :class:`SimulatorPredictor` runs the true tank physics on the forecast
  demand; with perfect foresight it is an exact oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np

from .model import DynamicsModel, predict
from .tank_sim import (
    CP_WATER,
    STEPS_PER_HOUR,
    TankConfig,
    TankState,
    step,
)

DEFAULT_EXHAUSTIVE_MAX_SLOTS = 32
DEFAULT_NODE_BUDGET = 200_000
DEFAULT_LOOKAHEAD = 24


@dataclass(frozen=True)
class Anchor:
    """Reheat-anchor features: hours and liters since the last reheat end, and its mid temperature."""

    t_hours: float
    w_liters: float
    t0: float


@dataclass(frozen=True)
class ControlProblem:
    cfg: TankConfig
    initial_state: TankState
    initial_anchor: Anchor
    demand_forecast: np.ndarray
    demand_realized: np.ndarray
    t_comfort: float = 40.0
    t_high: float = 58.0

    def __post_init__(self):
        if len(self.demand_forecast) < 1:
            raise ValueError("horizon must contain at least one slot")
        if len(self.demand_forecast) != len(self.demand_realized):
            raise ValueError("forecast and realized demand differ in length")
        if not (30.0 <= self.t_comfort <= 60.0):
            raise ValueError("t_comfort must lie in [30, 60] degC")

    @property
    def horizon_slots(self) -> int:
        return len(self.demand_forecast)

    @property
    def slot_energy_kwh(self) -> float:
        return self.cfg.heater_power * self.cfg.dt / 3.6e6


@dataclass(frozen=True)
class Schedule:
    hp_active: np.ndarray
    feasible: bool = True
    method: str = ""

    def __post_init__(self):
        object.__setattr__(self, "hp_active", np.asarray(self.hp_active, dtype=bool))

    def __len__(self) -> int:
        return len(self.hp_active)

    @property
    def on_slots(self) -> int:
        return int(self.hp_active.sum())


@dataclass(frozen=True)
class ControlOutcome:
    energy_kwh: float
    violation_slots: int
    max_violation: float
    t_mid: np.ndarray = field(repr=False, compare=False, default_factory=lambda: np.zeros(0))

    def usable(self, max_violation_slots: int = 2) -> bool:
        return self.violation_slots <= max_violation_slots


class Predictor(Protocol):
    def start(self, problem: ControlProblem) -> Any: ...

    def advance(self, carry: Any, slot: int, hp: bool) -> tuple[Any, float]: ...

    def idle_forecast(self, carry: Any, slot: int, n: int) -> np.ndarray: ...

    def reheat_slots(self, carry: Any, slot: int) -> int: ...


# --- predictors ----------------------------------------------------------

def reheat_energy(anchor: Anchor, cfg: TankConfig, t_high: float) -> float:
    """Heat (J) needed to return the tank to its post-reheat state.

    Drawn hot water was replaced at inlet temperature, the tank lost heat
    to ambient since the anchor, and the anchor itself may sit below
    ``t_high``.
    """
    replaced = anchor.w_liters * CP_WATER * max(anchor.t0 - cfg.t_inlet, 0.0)
    lost = cfg.ua_loss * max(anchor.t0 - cfg.t_ambient, 0.0) * anchor.t_hours * 3600.0
    topup = cfg.heat_capacity * max(t_high - anchor.t0, 0.0)
    return replaced + lost + topup


@dataclass
class _AnchorCarry:
    steps: int
    w: float
    t0: float
    run_len: int = 0


class AnchorPredictor:
    """Rollouts of a learned model through the reheat-anchor features."""

    def __init__(self, model: DynamicsModel, problem: ControlProblem):
        self.model = model
        self.problem = problem
        self._draws = np.asarray(problem.demand_forecast, dtype=float)

    def start(self, problem: ControlProblem) -> _AnchorCarry:
        a = problem.initial_anchor
        return _AnchorCarry(int(round(a.t_hours * STEPS_PER_HOUR)), a.w_liters, a.t0)

    def _anchor(self, c: _AnchorCarry) -> Anchor:
        return Anchor(c.steps / STEPS_PER_HOUR, c.w, c.t0)

    def _run_complete(self, c: _AnchorCarry) -> bool:
        p = self.problem
        need = reheat_energy(self._anchor(c), p.cfg, p.t_high)
        return c.run_len * p.cfg.heater_energy_per_step >= need

    def advance(self, carry: _AnchorCarry, slot: int, hp: bool) -> tuple[_AnchorCarry, float]:
        draw = float(self._draws[slot])
        if hp:
            c = _AnchorCarry(carry.steps + 1, carry.w + draw, carry.t0, carry.run_len + 1)
        elif carry.run_len and self._run_complete(carry):
            # the last heating slot is the new anchor; this slot is one step past it
            c = _AnchorCarry(1, draw, self.problem.t_high)
        else:
            c = _AnchorCarry(carry.steps + 1, carry.w + draw, carry.t0)
        return c, predict(self.model, np.array([c.steps / STEPS_PER_HOUR, c.w, c.t0]))

    def idle_forecast(self, carry: _AnchorCarry, slot: int, n: int) -> np.ndarray:
        if carry.run_len:
            carry, first = self.advance(carry, slot, False)
            if n == 1:
                return np.array([first])
            return np.concatenate([[first], self.idle_forecast(carry, slot + 1, n - 1)])
        k = np.arange(1, n + 1)
        w = carry.w + np.cumsum(self._draws[slot : slot + n])
        x = np.column_stack([(carry.steps + k) / STEPS_PER_HOUR, w, np.full(n, carry.t0)])
        return predict(self.model, x)

    def reheat_slots(self, carry: _AnchorCarry, slot: int) -> int:
        c = carry
        for n in range(1, self.problem.horizon_slots - slot + 1):
            c, _ = self.advance(c, slot + n - 1, True)
            if self._run_complete(c):
                return n
        return self.problem.horizon_slots - slot


class SimulatorPredictor:
    """The tank simulator itself, fed with the forecast demand."""

    def __init__(self, problem: ControlProblem):
        self.problem = problem
        self._draws = np.asarray(problem.demand_forecast, dtype=float)

    def start(self, problem: ControlProblem) -> TankState:
        return problem.initial_state

    def advance(self, carry: TankState, slot: int, hp: bool) -> tuple[TankState, float]:
        s = step(carry, float(self._draws[slot]), bool(hp), self.problem.cfg)
        return s, s.t_mid

    def idle_forecast(self, carry: TankState, slot: int, n: int) -> np.ndarray:
        out = np.empty(n)
        for i in range(n):
            carry, out[i] = self.advance(carry, slot + i, False)
        return out

    def reheat_slots(self, carry: TankState, slot: int) -> int:
        for n in range(1, self.problem.horizon_slots - slot + 1):
            carry, t = self.advance(carry, slot + n - 1, True)
            if t >= self.problem.t_high:
                return n
        return self.problem.horizon_slots - slot


def make_predictor(model, problem: ControlProblem) -> Predictor:
    if isinstance(model, DynamicsModel):
        return AnchorPredictor(model, problem)
    if model is None or model == "simulator":
        return SimulatorPredictor(problem)
    return model  # already a predictor


def predict_trajectory(model, problem: ControlProblem, schedule) -> np.ndarray:
    """Predicted mid-point temperature in every slot under ``schedule``."""
    pred = make_predictor(model, problem)
    hp = np.asarray(getattr(schedule, "hp_active", schedule), dtype=bool)
    if len(hp) != problem.horizon_slots:
        raise ValueError("schedule length differs from the horizon")
    carry = pred.start(problem)
    out = np.empty(len(hp))
    for s, on in enumerate(hp):
        carry, out[s] = pred.advance(carry, s, bool(on))
    return out


# --- search --------------------------------------------------------------

class _BudgetExceeded(Exception):
    pass


def _exhaustive(pred: Predictor, problem: ControlProblem, node_budget: int) -> np.ndarray | None:
    """Minimum on-slot count feasible schedule, latest heating on ties.

    Depth-first over slots, off before on, so complete feasible schedules
    are met in lexicographic order of their bit strings, i.e. latest first
    heating first. A prefix that already violates comfort is cut, as is any
    prefix whose on-count cannot beat the best found.
    """
    H = problem.horizon_slots
    tc = problem.t_comfort
    best: list[Any] = [H + 1, None]
    bits = np.zeros(H, dtype=bool)
    nodes = [0]

    def dfs(slot: int, carry, count: int) -> None:
        if slot == H:
            if count < best[0]:
                best[0], best[1] = count, bits.copy()
            return
        for on in (False, True):
            c = count + on
            if c >= best[0]:
                continue
            nodes[0] += 1
            if nodes[0] > node_budget:
                raise _BudgetExceeded
            nxt, t = pred.advance(carry, slot, on)
            if t < tc:
                continue
            bits[slot] = on
            dfs(slot + 1, nxt, c)
            bits[slot] = False

    dfs(0, pred.start(problem), 0)
    return best[1]


def _min_max_violation(pred: Predictor, problem: ControlProblem, node_budget: int) -> np.ndarray:
    """Branch and bound on (predicted worst shortfall, on-slot count)."""
    H = problem.horizon_slots
    tc = problem.t_comfort
    best: list[Any] = [(math.inf, H + 1), np.ones(H, dtype=bool)]
    bits = np.zeros(H, dtype=bool)
    nodes = [0]

    def dfs(slot: int, carry, worst: float, count: int) -> None:
        if slot == H:
            if (worst, count) < best[0]:
                best[0], best[1] = (worst, count), bits.copy()
            return
        for on in (True, False):
            nodes[0] += 1
            if nodes[0] > node_budget:
                raise _BudgetExceeded
            nxt, t = pred.advance(carry, slot, on)
            w = max(worst, tc - t, 0.0)
            if (w, count + on) >= best[0]:
                continue
            bits[slot] = on
            dfs(slot + 1, nxt, w, count + on)
            bits[slot] = False

    dfs(0, pred.start(problem), 0.0, 0)
    return best[1]


def _greedy(pred: Predictor, problem: ControlProblem, lookahead: int) -> np.ndarray:
    """Receding horizon: idle until waiting one more slot would leave no time to reheat."""
    H = problem.horizon_slots
    tc = problem.t_comfort
    hp = np.zeros(H, dtype=bool)
    carry = pred.start(problem)
    s = 0
    while s < H:
        n = min(lookahead, H - s)
        ahead = pred.idle_forecast(carry, s, n)
        bad = np.flatnonzero(ahead < tc)
        idle, _ = pred.advance(carry, s, False)
        if len(bad):
            v = s + int(bad[0])
            # heat now if a run started next slot could not end before v
            if v == s or v - (s + 1) < pred.reheat_slots(idle, s + 1):
                run = min(max(pred.reheat_slots(carry, s), 1), H - s)
                for i in range(run):
                    hp[s + i] = True
                    carry, _ = pred.advance(carry, s + i, True)
                s += run
                continue
        carry = idle
        s += 1
    return hp


def _score(pred: Predictor, problem: ControlProblem, hp: np.ndarray) -> tuple[float, int]:
    traj = predict_trajectory(pred, problem, hp)
    return float(np.max(np.maximum(problem.t_comfort - traj, 0.0))), int(hp.sum())


def optimize_schedule(
    model,
    problem: ControlProblem,
    exhaustive_max_slots: int = DEFAULT_EXHAUSTIVE_MAX_SLOTS,
    lookahead: int = DEFAULT_LOOKAHEAD,
    node_budget: int = DEFAULT_NODE_BUDGET,
) -> Schedule:
    """Cheapest schedule the model predicts to be comfortable.

    Short horizons are searched exactly; longer ones (or searches that run
    past ``node_budget``) use the receding-horizon rule. When the model sees
    no comfortable schedule, the one with the smallest predicted worst
    shortfall is returned with ``feasible=False``.
    """
    pred = make_predictor(model, problem)
    H = problem.horizon_slots
    if H <= exhaustive_max_slots:
        try:
            hp = _exhaustive(pred, problem, node_budget)
            if hp is not None:
                return Schedule(hp, True, "exhaustive")
            return Schedule(_min_max_violation(pred, problem, node_budget), False, "exhaustive-fallback")
        except _BudgetExceeded:
            pass
    hp = _greedy(pred, problem, lookahead)
    worst, _ = _score(pred, problem, hp)
    if worst == 0.0:
        return Schedule(hp, True, "greedy")
    all_on = np.ones(H, dtype=bool)
    if _score(pred, problem, all_on) < (worst, int(hp.sum())):
        hp = all_on
    return Schedule(hp, False, "greedy-fallback")


def evaluate_schedule(problem: ControlProblem, schedule) -> ControlOutcome:
    """Score a schedule on the true simulator with the realized demand."""
    hp = np.asarray(getattr(schedule, "hp_active", schedule), dtype=bool)
    if len(hp) != problem.horizon_slots:
        raise ValueError("schedule length differs from the horizon")
    state = problem.initial_state
    t_mid = np.empty(len(hp))
    for s, on in enumerate(hp):
        state = step(state, float(problem.demand_realized[s]), bool(on), problem.cfg)
        t_mid[s] = state.t_mid
    shortfall = np.maximum(problem.t_comfort - t_mid, 0.0)
    return ControlOutcome(
        energy_kwh=int(hp.sum()) * problem.slot_energy_kwh,
        violation_slots=int(np.count_nonzero(t_mid < problem.t_comfort)),
        max_violation=float(shortfall.max()),
        t_mid=t_mid,
    )


# --- problems from simulated households ------------------------------------

def forecast_profile_mean(profile, start_step: int, n: int) -> np.ndarray:
    """Expected liters per slot from the household's hourly event rates."""
    from .tank_sim import STEPS_PER_DAY

    rates = np.repeat(np.asarray(profile.draw_rate_by_hour, dtype=float), STEPS_PER_HOUR)
    slot_of_day = (start_step + np.arange(n)) % STEPS_PER_DAY
    return rates[slot_of_day] / STEPS_PER_HOUR * profile.draw_volume_mean


def problem_for_day(
    cfg: TankConfig,
    profile,
    day: int,
    horizon_slots: int = 96,
    t_comfort: float = 40.0,
    forecast: str = "perfect",
) -> ControlProblem:
    """Control problem starting at the first reheat end on or after ``day``.

    The household is re-simulated under its hysteresis controller up to
    that point; the horizon then covers the next ``horizon_slots`` steps of
    its realized demand.
    """
    from .tank_sim import STEPS_PER_DAY, simulate_household

    start = day * STEPS_PER_DAY
    search = 2 * STEPS_PER_DAY  # reheat ends occur several times a day
    n_days = day + (search + horizon_slots) // STEPS_PER_DAY + 2
    series, cap = simulate_household(
        cfg, profile, n_days, capture_steps=range(start + 1, start + search + 2)
    )
    hp = series.hp_active
    ends = np.flatnonzero(hp[start : start + search] & ~hp[start + 1 : start + search + 1]) + start + 1
    if not len(ends):
        raise ValueError(f"no reheat ends within two days of day {day}")
    k = int(ends[0])
    draws = series.draw_liters[k + 1 : k + 1 + horizon_slots]
    if forecast == "perfect":
        fc = draws.copy()
    elif forecast == "profile_mean":
        fc = forecast_profile_mean(profile, k + 1, horizon_slots)
    else:
        raise ValueError(f"unknown forecast mode {forecast!r}")
    return ControlProblem(
        cfg=cfg,
        initial_state=cap[k + 1],
        initial_anchor=Anchor(0.0, 0.0, float(series.t_mid[k])),
        demand_forecast=fc,
        demand_realized=draws.copy(),
        t_comfort=t_comfort,
        t_high=profile.t_high,
    )


# --- control study -------------------------------------------------------

ORACLE = "oracle"
STUDY_COLUMNS = ("variant", "system", "checkpoint", "day", "energy_kwh", "violation_slots", "max_violation", "usable")


@dataclass(frozen=True)
class StudyConfig:
    days: tuple[int, ...] = (322,)  # mid-holdout (week 46)
    horizon_slots: int = 96
    t_comfort: float = 40.0
    forecast: str = "perfect"
    max_violation_slots: int = 2
    lookahead: int = DEFAULT_LOOKAHEAD
    exhaustive_max_slots: int = DEFAULT_EXHAUSTIVE_MAX_SLOTS
    node_budget: int = DEFAULT_NODE_BUDGET
    # (variant, checkpoint or None); checkpoint-free variants are the PTMs
    models: tuple[tuple[str, int | None], ...] = (
        ("local", 4), ("local", 8), ("local", 16), ("local", 32),
        ("ptm_small", None), ("ptm_large", None),
        ("ptm_small_ft", 4), ("ptm_small_ft", 32),
        ("ptm_large_ft", 4), ("ptm_large_ft", 32),
    )
    seed_index: int = 0

    def __post_init__(self):
        if not self.days:
            raise ValueError("at least one control day is required")
        if self.max_violation_slots < 0:
            raise ValueError("max_violation_slots must be >= 0")


@dataclass(frozen=True)
class StudyRow:
    variant: str
    system_id: str
    checkpoint_weeks: int | None
    day: int
    outcome: ControlOutcome | None
    usable: bool | None
    note: str = ""


def _study_system(args) -> list[StudyRow]:
    cfg, profile, models_dir, sc = args
    from pathlib import Path

    from .experiments import model_relpath
    from .model import ModelLoadError, load

    models, notes = {}, {}
    for variant, cp in sc.models:
        path = Path(models_dir) / model_relpath(variant, profile.household_id, cp, sc.seed_index)
        try:
            models[(variant, cp)] = load(path)
        except (ModelLoadError, OSError) as exc:
            notes[(variant, cp)] = f"model unavailable: {exc}"
    rows = []
    for day in sc.days:
        problem = problem_for_day(cfg, profile, day, sc.horizon_slots, sc.t_comfort, sc.forecast)
        oracle_problem = problem
        if sc.forecast != "perfect":
            from dataclasses import replace

            oracle_problem = replace(problem, demand_forecast=problem.demand_realized.copy())
        for (variant, cp), model, prob in [((ORACLE, None), None, oracle_problem)] + [
            (key, models.get(key), problem) for key in sc.models
        ]:
            if variant != ORACLE and model is None:
                rows.append(StudyRow(variant, profile.household_id, cp, day, None, None, notes[(variant, cp)]))
                continue
            sched = optimize_schedule(
                model if model is not None else "simulator", prob,
                sc.exhaustive_max_slots, sc.lookahead, sc.node_budget,
            )
            out = evaluate_schedule(problem, sched)
            rows.append(StudyRow(variant, profile.household_id, cp, day, out, out.usable(sc.max_violation_slots)))
    return rows


def run_control_study(cfg: TankConfig, profiles: list, models_dir, sc: StudyConfig = StudyConfig(),
                      jobs: int = 1) -> list[StudyRow]:
    """Solve and score every requested day for each target profile and model.

    Rows come out ordered by system, then day, then the oracle followed by
    the models in ``sc.models`` order. Missing model files become rows with
    no outcome and a diagnostic note.
    """
    tasks = [(cfg, p, str(models_dir), sc) for p in profiles]
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_study_system, tasks, chunksize=1))
    else:
        parts = [_study_system(t) for t in tasks]
    return [r for part in parts for r in part]


def usable_systems(rows: list[StudyRow]) -> dict[tuple[str, int | None], int]:
    """Systems per (variant, checkpoint) usable on a strict majority of their requested days."""
    per: dict[tuple[str, int | None], dict[str, list[bool]]] = {}
    for r in rows:
        per.setdefault((r.variant, r.checkpoint_weeks), {}).setdefault(r.system_id, []).append(bool(r.usable))
    return {k: sum(2 * sum(v) > len(v) for v in systems.values()) for k, systems in per.items()}


def study_summary(rows: list[StudyRow]) -> dict:
    """Usable-system counts and mean energy above the oracle per model."""
    oracle = {(r.system_id, r.day): r.outcome.energy_kwh for r in rows if r.variant == ORACLE}
    counts = usable_systems(rows)
    out = {}
    for (variant, cp), n_usable in counts.items():
        sel = [r for r in rows if (r.variant, r.checkpoint_weeks) == (variant, cp) and r.outcome is not None]
        gap = [r.outcome.energy_kwh - oracle[(r.system_id, r.day)] for r in sel]
        key = variant if cp is None else f"{variant}@{cp}"
        out[key] = {
            "usable_systems": n_usable,
            "mean_violation_slots": float(np.mean([r.outcome.violation_slots for r in sel])) if sel else None,
            "mean_energy_above_oracle_kwh": float(np.mean(gap)) if gap else None,
            "missing": sum(1 for r in rows if (r.variant, r.checkpoint_weeks) == (variant, cp) and r.outcome is None),
        }
    return out


def write_study_csv(rows: list[StudyRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(STUDY_COLUMNS) + "\n")
        for r in rows:
            cp = "" if r.checkpoint_weeks is None else str(r.checkpoint_weeks)
            if r.outcome is None:
                fh.write(f"{r.variant},{r.system_id},{cp},{r.day},,,,\n")
                continue
            o = r.outcome
            fh.write(
                f"{r.variant},{r.system_id},{cp},{r.day},{float(o.energy_kwh)!r},{o.violation_slots},"
                f"{float(o.max_violation)!r},{int(r.usable)}\n"
            )
