"""
Stratified hot-water tank simulator and synthetic household corpus.

The tank is a one-dimensional stack of equal-volume layers, index 0 at the
top. One call to :func:`step` advances the tank by ``dt`` seconds:

1. plug-flow draw: hottest water leaves the top, cold inlet water enters
   the bottom, layers shift by a fractional number of layers;
2. heat injection into the bottom two layers while the heat pump runs;
3. ambient loss, exact exponential relaxation per layer;
4. inter-layer conduction, exact matrix exponential of the layer Laplacian;
5. buoyancy mixing of inverted regions to their volume-weighted mean.

Households differ only in draw behaviour and setpoints; the tank itself is
identical across the corpus.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from scipy.linalg import expm

CP_WATER = 4186.0  # J/(kg K), 1 L of water taken as 1 kg
STEPS_PER_HOUR = 4
STEPS_PER_DAY = 96
STEPS_PER_WEEK = 7 * STEPS_PER_DAY
DAYS_PER_YEAR = 365

# expected draw events per hour, morning and evening peaks (sums to 18/day)
BASE_DRAW_RATE = (
    0.10, 0.05, 0.05, 0.05, 0.10, 0.30,
    1.10, 1.90, 1.60, 0.90, 0.60, 0.60,
    0.80, 0.60, 0.40, 0.40, 0.50, 0.80,
    1.40, 1.80, 1.50, 1.20, 0.80, 0.45,
)


class InvalidDrawError(ValueError):
    """Requested draw exceeds the tank volume or is negative."""


class NumericFaultError(ArithmeticError):
    """Tank state contains non-finite temperatures."""


@dataclass(frozen=True)
class TankConfig:
    n_layers: int = 10
    volume: float = 200.0
    ua_loss: float = 2.0
    k_cond: float = 0.8
    t_ambient: float = 18.0
    t_inlet: float = 12.0
    heater_power: float = 2000.0
    dt: float = 900.0

    def __post_init__(self):
        if self.n_layers < 2 or self.n_layers % 2:
            raise ValueError(f"n_layers must be even and >= 2, got {self.n_layers}")
        for name in ("volume", "ua_loss", "k_cond", "heater_power", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.t_inlet > self.t_ambient + 30:
            raise ValueError("t_inlet exceeds t_ambient + 30; check units")

    @property
    def layer_volume(self) -> float:
        return self.volume / self.n_layers

    @property
    def heat_capacity(self) -> float:
        """Whole-tank heat capacity in J/K."""
        return self.volume * CP_WATER

    @property
    def heater_energy_per_step(self) -> float:
        return self.heater_power * self.dt


@dataclass(frozen=True)
class HouseholdProfile:
    household_id: str
    draw_rate_by_hour: tuple[float, ...]
    draw_volume_mean: float
    draw_volume_sd: float
    t_low: float
    t_high: float
    seed: int

    def __post_init__(self):
        if len(self.draw_rate_by_hour) != 24:
            raise ValueError("draw_rate_by_hour needs 24 entries")
        if any(r < 0 for r in self.draw_rate_by_hour):
            raise ValueError("draw rates must be >= 0")
        if not self.draw_volume_mean > 0 or self.draw_volume_sd < 0:
            raise ValueError("draw volume mean must be > 0 and sd >= 0")
        if not (30.0 <= self.t_low < self.t_high <= 70.0):
            raise ValueError(
                f"setpoints must satisfy 30 <= t_low < t_high <= 70, "
                f"got t_low={self.t_low}, t_high={self.t_high}"
            )


@dataclass(frozen=True)
class TankState:
    """Layer temperatures in °C, index 0 is the top of the tank."""

    layer_temps: np.ndarray

    @classmethod
    def uniform(cls, temp: float, cfg: TankConfig) -> "TankState":
        return cls(np.full(cfg.n_layers, float(temp)))

    @property
    def t_mid(self) -> float:
        return mid_temperature(self.layer_temps)

    def internal_energy(self, cfg: TankConfig) -> float:
        """Energy content relative to 0 °C, in J."""
        return float(self.layer_temps.sum()) * cfg.layer_volume * CP_WATER


class SimRecord(NamedTuple):
    step_index: int
    draw_liters: float
    hp_active: bool
    t_mid: float


@dataclass(frozen=True)
class StepEnergy:
    """Per-step energy terms in J; see :func:`step_with_energy`."""

    u_before: float
    u_after: float
    heat_in: float
    ambient_loss: float
    draw_out: float
    inlet_in: float

    @property
    def residual(self) -> float:
        return (self.u_after - self.u_before) - (
            self.heat_in - self.ambient_loss - self.draw_out + self.inlet_in
        )


def mid_temperature(layer_temps: np.ndarray) -> float:
    n = len(layer_temps)
    return 0.5 * (float(layer_temps[n // 2 - 1]) + float(layer_temps[n // 2]))


@lru_cache(maxsize=32)
def _conduction_matrix(n: int, rate_dt: float) -> np.ndarray:
    lap = np.zeros((n, n))
    for i in range(n - 1):
        lap[i, i] += 1.0
        lap[i + 1, i + 1] += 1.0
        lap[i, i + 1] -= 1.0
        lap[i + 1, i] -= 1.0
    return expm(-rate_dt * lap)


def _plug_flow(temps: np.ndarray, draw: float, cfg: TankConfig) -> tuple[np.ndarray, float]:
    """Shift the column up by ``draw`` liters; returns new temps and the mean outflow temperature·volume."""
    n = len(temps)
    v = cfg.layer_volume
    # cumulative heat content (°C·L) along depth, extended with inlet water below the tank
    xs = np.arange(n + 2, dtype=float) * v
    xs[-1] = 2.0 * cfg.volume
    cum = np.empty(n + 2)
    cum[0] = 0.0
    np.cumsum(temps * v, out=cum[1 : n + 1])
    cum[-1] = cum[n] + cfg.t_inlet * cfg.volume
    edges = np.arange(n + 1, dtype=float) * v + draw
    h = np.interp(edges, xs, cum)
    out = float(np.interp(draw, xs, cum))
    return np.diff(h) / v, out


def _mix_inversions(temps: np.ndarray) -> np.ndarray:
    # pool adjacent violators with equal layer volumes: exact, terminates,
    # conserves layer-volume-weighted energy
    sums: list[float] = []
    counts: list[int] = []
    for t in temps.tolist():
        s, c = t, 1
        while sums and s / c > sums[-1] / counts[-1]:
            s += sums.pop()
            c += counts.pop()
        sums.append(s)
        counts.append(c)
    if len(sums) == len(temps):
        return temps
    return np.repeat([s / c for s, c in zip(sums, counts)], counts)


def step_with_energy(
    state: TankState, draw_liters: float, hp_active: bool, cfg: TankConfig
) -> tuple[TankState, StepEnergy]:
    """Advance the tank by one ``cfg.dt`` and report every energy term."""
    temps = state.layer_temps
    if not np.all(np.isfinite(temps)):
        raise NumericFaultError("tank state contains non-finite temperatures")
    if not (0.0 <= draw_liters <= cfg.volume):
        raise InvalidDrawError(f"draw of {draw_liters} L outside [0, {cfg.volume}]")

    m_layer = cfg.layer_volume  # kg
    u_before = float(temps.sum()) * m_layer * CP_WATER

    draw_out = inlet_in = 0.0
    if draw_liters > 0.0:
        temps, out_tv = _plug_flow(temps, draw_liters, cfg)
        draw_out = out_tv * CP_WATER
        inlet_in = draw_liters * cfg.t_inlet * CP_WATER
    else:
        temps = temps.copy()

    heat_in = 0.0
    if hp_active:
        heat_in = cfg.heater_energy_per_step
        temps[-2:] += 0.5 * heat_in / (m_layer * CP_WATER)

    decay = math.exp(-cfg.ua_loss * cfg.dt / cfg.heat_capacity)
    before_loss = temps
    temps = cfg.t_ambient + (temps - cfg.t_ambient) * decay
    ambient_loss = float((before_loss - temps).sum()) * m_layer * CP_WATER

    rate_dt = cfg.k_cond * cfg.dt / (m_layer * CP_WATER)
    temps = _conduction_matrix(cfg.n_layers, rate_dt) @ temps
    temps = _mix_inversions(temps)

    if not np.all(np.isfinite(temps)):
        raise NumericFaultError("step produced non-finite temperatures")
    u_after = float(temps.sum()) * m_layer * CP_WATER
    energy = StepEnergy(u_before, u_after, heat_in, ambient_loss, draw_out, inlet_in)
    return TankState(temps), energy


def step(state: TankState, draw_liters: float, hp_active: bool, cfg: TankConfig) -> TankState:
    return step_with_energy(state, draw_liters, hp_active, cfg)[0]


def hysteresis_control(state: TankState, profile: HouseholdProfile, prev_hp_active: bool) -> bool:
    t_mid = state.t_mid
    if t_mid < profile.t_low:
        return True
    if t_mid >= profile.t_high:
        return False
    return bool(prev_hp_active)


def sample_draws(profile: HouseholdProfile, day_index: int) -> np.ndarray:
    """Liters drawn in each of the 96 quarter-hours of one day.

    The random stream is keyed by ``(profile.seed, day_index)`` so any day
    can be regenerated independently of the others.
    """
    rng = np.random.default_rng([profile.seed, day_index])
    rates = np.repeat(np.asarray(profile.draw_rate_by_hour, dtype=float), STEPS_PER_HOUR)
    counts = rng.poisson(rates / STEPS_PER_HOUR)
    n_events = int(counts.sum())
    volumes = rng.normal(profile.draw_volume_mean, profile.draw_volume_sd, n_events)
    # truncate at zero by redrawing the negative tail
    while True:
        bad = volumes < 0
        if not bad.any():
            break
        volumes[bad] = rng.normal(profile.draw_volume_mean, profile.draw_volume_sd, int(bad.sum()))
    out = np.zeros(STEPS_PER_DAY)
    np.add.at(out, np.repeat(np.arange(STEPS_PER_DAY), counts), volumes)
    return out


@dataclass
class HouseholdSeries:
    """One household's observation series stored column-wise."""

    household_id: str
    draw_liters: np.ndarray
    hp_active: np.ndarray
    t_mid: np.ndarray
    profile: HouseholdProfile | None = None

    def __len__(self) -> int:
        return len(self.t_mid)

    @property
    def step_index(self) -> np.ndarray:
        return np.arange(len(self.t_mid))

    def records(self) -> Iterator[SimRecord]:
        for i, (d, h, t) in enumerate(zip(self.draw_liters, self.hp_active, self.t_mid)):
            yield SimRecord(i, float(d), bool(h), float(t))


def simulate_household(
    cfg: TankConfig,
    profile: HouseholdProfile,
    n_days: int,
    capture_steps: Sequence[int] = (),
) -> tuple[HouseholdSeries, dict[int, TankState]]:
    """Run the hysteresis-controlled tank for ``n_days``.

    At each quarter-hour the controller decides from the state left by the
    previous step, then the tank advances with that step's draw. The record
    stores the draw, the decision, and the mid-point temperature after the
    step. ``capture_steps`` lists step indices whose *pre-step* states are
    returned, keyed by index.
    """
    if n_days < 1:
        raise ValueError("n_days must be >= 1")
    n = n_days * STEPS_PER_DAY
    draws = np.concatenate([sample_draws(profile, d) for d in range(n_days)])
    hp = np.zeros(n, dtype=bool)
    t_mid = np.empty(n)
    wanted = set(capture_steps)
    captured: dict[int, TankState] = {}

    state = TankState.uniform(0.5 * (profile.t_low + profile.t_high), cfg)
    prev = False
    for k in range(n):
        if k in wanted:
            captured[k] = state
        prev = hysteresis_control(state, profile, prev)
        hp[k] = prev
        state = step(state, float(draws[k]), prev, cfg)
        t_mid[k] = state.t_mid
    if n in wanted:
        captured[n] = state
    return HouseholdSeries(profile.household_id, draws, hp, t_mid, profile), captured


@dataclass(frozen=True)
class CorpusConfig:
    master_seed: int = 2023
    n_source: int = 8
    n_target: int = 16
    n_days: int = DAYS_PER_YEAR
    tank: TankConfig = field(default_factory=TankConfig)
    base_draw_rate: tuple[float, ...] = BASE_DRAW_RATE
    rate_scale_range: tuple[float, float] = (0.5, 1.6)
    volume_mean_range: tuple[float, float] = (5.0, 12.0)
    volume_sd_fraction: float = 0.4
    t_low: float = 42.0
    t_high: float = 58.0
    setpoint_jitter: float = 2.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Corpus:
    config: CorpusConfig
    source: list[HouseholdSeries]
    target: list[HouseholdSeries]

    @property
    def profiles(self) -> dict[str, HouseholdProfile]:
        return {s.household_id: s.profile for s in self.source + self.target}


def draw_profiles(cc: CorpusConfig) -> tuple[list[HouseholdProfile], list[HouseholdProfile]]:
    """Sample the heterogeneous household profiles from the master seed."""
    rng = np.random.default_rng(cc.master_seed)
    n_total = cc.n_source + cc.n_target
    seeds = np.random.SeedSequence(cc.master_seed).generate_state(n_total)
    base = np.asarray(cc.base_draw_rate, dtype=float)
    profiles = []
    for i in range(n_total):
        scale = rng.uniform(*cc.rate_scale_range)
        vol_mean = rng.uniform(*cc.volume_mean_range)
        t_low = cc.t_low + rng.uniform(-cc.setpoint_jitter, cc.setpoint_jitter)
        t_high = cc.t_high + rng.uniform(-cc.setpoint_jitter, cc.setpoint_jitter)
        prefix = "src" if i < cc.n_source else "tgt"
        idx = i if i < cc.n_source else i - cc.n_source
        profiles.append(
            HouseholdProfile(
                household_id=f"{prefix}{idx:02d}",
                draw_rate_by_hour=tuple(float(r) for r in base * scale),
                draw_volume_mean=float(vol_mean),
                draw_volume_sd=float(cc.volume_sd_fraction * vol_mean),
                t_low=float(t_low),
                t_high=float(t_high),
                seed=int(seeds[i]),
            )
        )
    return profiles[: cc.n_source], profiles[cc.n_source :]


def _simulate_one(args):
    cfg, profile, n_days = args
    return simulate_household(cfg, profile, n_days)[0]


def generate_corpus(cc: CorpusConfig, jobs: int = 1) -> Corpus:
    src_profiles, tgt_profiles = draw_profiles(cc)
    tasks = [(cc.tank, p, cc.n_days) for p in src_profiles + tgt_profiles]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            series = list(pool.map(_simulate_one, tasks))
    else:
        series = [_simulate_one(t) for t in tasks]
    return Corpus(cc, series[: cc.n_source], series[cc.n_source :])


# --- CSV interface -------------------------------------------------------

CSV_HEADER = ("step", "draw_liters", "hp_active", "t_mid")


def write_series_csv(series: HouseholdSeries, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        lines = [
            f"{i},{d:.4f},{int(h)},{t:.4f}\n"
            for i, (d, h, t) in enumerate(zip(series.draw_liters, series.hp_active, series.t_mid))
        ]
        fh.writelines(lines)


def read_series_csv(path: Path, household_id: str | None = None) -> HouseholdSeries:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}, got {header}")
        rows = list(reader)
    try:
        arr = np.array(rows, dtype=float)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed record ({exc})") from None
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"{path}: expected 4 columns")
    if not np.array_equal(arr[:, 0], np.arange(len(arr))):
        raise ValueError(f"{path}: step column must be 0..n-1 without gaps")
    if np.any(arr[:, 1] < 0):
        raise ValueError(f"{path}: negative draw volume")
    return HouseholdSeries(
        household_id or path.stem, arr[:, 1], arr[:, 2].astype(bool), arr[:, 3]
    )


def write_corpus(corpus: Corpus, corpus_dir: Path) -> None:
    import json

    corpus_dir = Path(corpus_dir)
    for set_name, members in (("source", corpus.source), ("target", corpus.target)):
        for s in members:
            write_series_csv(s, corpus_dir / set_name / f"{s.household_id}.csv")
    manifest = {
        "config": corpus.config.to_dict(),
        "profiles": [asdict(p) for p in corpus.profiles.values()],
        "source": [s.household_id for s in corpus.source],
        "target": [s.household_id for s in corpus.target],
    }
    with open(corpus_dir / "corpus.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_corpus(corpus_dir: Path) -> tuple[dict, list[HouseholdSeries], list[HouseholdSeries]]:
    """Load a corpus directory: returns (manifest, source series, target series)."""
    import json

    corpus_dir = Path(corpus_dir)
    manifest_path = corpus_dir / "corpus.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no corpus manifest at {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    profiles = {
        p["household_id"]: HouseholdProfile(**{**p, "draw_rate_by_hour": tuple(p["draw_rate_by_hour"])})
        for p in manifest["profiles"]
    }
    loaded = {}
    for set_name in ("source", "target"):
        loaded[set_name] = []
        for hid in manifest[set_name]:
            s = read_series_csv(corpus_dir / set_name / f"{hid}.csv", hid)
            s.profile = profiles[hid]
            loaded[set_name].append(s)
    return manifest, loaded["source"], loaded["target"]
