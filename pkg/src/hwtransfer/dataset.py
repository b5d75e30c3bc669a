"""Regression examples (time since reheat, draw since reheat, anchor temperature) -> mid temperature."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tank_sim import STEPS_PER_HOUR, STEPS_PER_WEEK, HouseholdSeries

CHECKPOINT_WEEKS = (4, 8, 16, 32)
HOLDOUT_START_WEEK = 40
HOLDOUT_END_WEEK = 52
EXAMPLE_SPACING = STEPS_PER_HOUR  # one example per idle hour


class DegenerateFeatureError(ValueError):
    """A feature column has zero variance."""


@dataclass(frozen=True)
class Examples:
    """Column-wise set of regression examples.

    ``x`` holds (t_elapsed [h], w_cum [L], t0 [°C]); ``y`` the mid-point
    temperature at the target step; ``step`` the target step index, used for
    window selection only.
    """

    x: np.ndarray
    y: np.ndarray
    step: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def empty(cls) -> "Examples":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64))

    def subset(self, mask: np.ndarray) -> "Examples":
        return Examples(self.x[mask], self.y[mask], self.step[mask])

    @staticmethod
    def concat(parts: list["Examples"]) -> "Examples":
        if not parts:
            return Examples.empty()
        return Examples(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.step for p in parts]),
        )

    def fingerprint(self) -> bytes:
        return self.x.tobytes() + self.y.tobytes() + self.step.tobytes()


@dataclass(frozen=True)
class SplitSpec:
    checkpoint_weeks: int
    holdout_weeks: tuple[int, int] = (HOLDOUT_START_WEEK, HOLDOUT_END_WEEK)

    def __post_init__(self):
        if self.checkpoint_weeks <= 0 or self.checkpoint_weeks > self.holdout_weeks[0]:
            raise ValueError(
                f"training window [0, {self.checkpoint_weeks}) weeks would overlap the "
                f"holdout starting at week {self.holdout_weeks[0]}"
            )


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    sd: np.ndarray

    def __post_init__(self):
        if np.any(~(np.asarray(self.sd) > 0)):
            raise DegenerateFeatureError("normalization sd must be > 0")


def extract_examples(series: HouseholdSeries) -> Examples:
    """Scan idle phases and emit hourly examples anchored at each reheat end.

    The anchor is the first idle step after an active run; its own draw
    is already reflected in ``t0`` and is not counted in ``w_cum``.
    """
    hp = np.asarray(series.hp_active, dtype=bool)
    draws = np.asarray(series.draw_liters, dtype=float)
    t_mid = np.asarray(series.t_mid, dtype=float)
    if not (len(hp) == len(draws) == len(t_mid)):
        raise ValueError("series columns differ in length")
    if np.any(~np.isfinite(t_mid)) or np.any(~np.isfinite(draws)) or np.any(draws < 0):
        raise ValueError("series contains non-finite values or negative draws")

    n = len(hp)
    anchors = np.flatnonzero(hp[:-1] & ~hp[1:]) + 1
    xs, ys, steps = [], [], []
    cum_draw = np.concatenate([[0.0], np.cumsum(draws)])
    for k in anchors:
        nxt = np.flatnonzero(hp[k:])
        end = k + int(nxt[0]) if len(nxt) else n
        j = np.arange(k, end, EXAMPLE_SPACING)
        xs.append(
            np.column_stack(
                [(j - k) / STEPS_PER_HOUR, cum_draw[j + 1] - cum_draw[k + 1], np.full(len(j), t_mid[k])]
            )
        )
        ys.append(t_mid[j])
        steps.append(j)
    if not xs:
        return Examples.empty()
    return Examples(np.concatenate(xs), np.concatenate(ys), np.concatenate(steps).astype(np.int64))


def split_train(examples: Examples, spec: SplitSpec) -> Examples:
    return examples.subset(examples.step < spec.checkpoint_weeks * STEPS_PER_WEEK)


def window(examples: Examples, start_week: float, end_week: float) -> Examples:
    lo, hi = start_week * STEPS_PER_WEEK, end_week * STEPS_PER_WEEK
    return examples.subset((examples.step >= lo) & (examples.step < hi))


def extract_holdout(examples: Examples, spec: SplitSpec | None = None) -> Examples:
    start, end = spec.holdout_weeks if spec else (HOLDOUT_START_WEEK, HOLDOUT_END_WEEK)
    held = window(examples, start, end)
    if len(held) == 0:
        raise ValueError("holdout window contains no examples; is the series a full year?")
    return held


def compute_norm_stats(train: Examples) -> NormStats:
    if len(train) < 2:
        raise DegenerateFeatureError("need at least 2 examples to compute normalization")
    mean = train.x.mean(axis=0)
    sd = train.x.std(axis=0)  # population convention
    if np.any(sd <= 0):
        names = np.array(["t_elapsed", "w_cum", "t0"])[sd <= 0]
        raise DegenerateFeatureError(f"constant feature column(s): {', '.join(names)}")
    return NormStats(mean, sd)


def write_examples_csv(examples: Examples, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("t_hours,w_liters,t0,target_tm\n")
        for (t, w, t0), y in zip(examples.x.tolist(), examples.y.tolist()):
            fh.write(f"{t!r},{w!r},{t0!r},{y!r}\n")
