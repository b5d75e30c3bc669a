"""
Two-hidden-layer ReLU network with input standardization.

    z   = (x - mean) / sd
    out = W3 relu(W2 relu(W1 z + b1) + b2) + b3

Fitted with minibatch Adam on the mean absolute error plus an L2 penalty on
the weight matrices (biases are not penalized). All parameters live in one
flat float64 vector so the optimizer update is a handful of array ops; the
per-layer matrices are views into it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import Examples, NormStats, compute_norm_stats

MODEL_FORMAT = "hwtransfer-mlp"
MODEL_FORMAT_VERSION = 1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
N_INPUTS = 3


class InsufficientDataError(ValueError):
    pass


class ModelLoadError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    h1: int = 32
    h2: int = 32
    lr: float = 1e-3
    epochs: int = 400
    batch_size: int = 64
    l2_lambda: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if min(self.h1, self.h2, self.batch_size) < 1:
            raise ValueError("hidden widths and batch size must be positive")
        if self.epochs < 0 or self.l2_lambda < 0 or self.seed < 0:
            raise ValueError("epochs, l2_lambda and seed must be non-negative")
        if not (0 <= self.lr < 1):
            raise ValueError("lr must lie in [0, 1)")


@dataclass(frozen=True)
class FineTuneConfig:
    lr_scale: float = 0.1
    epoch_scale: float = 0.2
    freeze_norm: bool = True

    def __post_init__(self):
        if not (0 <= self.lr_scale < 1) or not (0 <= self.epoch_scale < 1):
            raise ValueError("lr_scale and epoch_scale must lie in [0, 1)")


def _layout(h1: int, h2: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        ("W1", (h1, N_INPUTS)),
        ("b1", (h1,)),
        ("W2", (h2, h1)),
        ("b2", (h2,)),
        ("W3", (1, h2)),
        ("b3", (1,)),
    ]


def _views(flat: np.ndarray, h1: int, h2: int) -> dict[str, np.ndarray]:
    out, i = {}, 0
    for name, shape in _layout(h1, h2):
        size = math.prod(shape)
        out[name] = flat[i : i + size].reshape(shape)
        i += size
    return out


def n_params(h1: int, h2: int) -> int:
    return sum(math.prod(s) for _, s in _layout(h1, h2))


def _weight_mask(h1: int, h2: int) -> np.ndarray:
    mask = np.zeros(n_params(h1, h2))
    v = _views(mask, h1, h2)
    for name in ("W1", "W2", "W3"):
        v[name][...] = 1.0
    return mask


@dataclass(frozen=True, eq=False)
class DynamicsModel:
    norm: NormStats
    params: np.ndarray
    h1: int
    h2: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.params.shape != (n_params(self.h1, self.h2),):
            raise ValueError("parameter vector does not match layer shapes")
        if not np.all(np.isfinite(self.params)):
            raise ValueError("model parameters must be finite")

    @property
    def layers(self) -> dict[str, np.ndarray]:
        return _views(self.params, self.h1, self.h2)

    def __call__(self, x) -> np.ndarray:
        return predict(self, x)


def init(cfg: TrainConfig, norm: NormStats, metadata: dict | None = None) -> DynamicsModel:
    """Glorot-uniform weights, zero biases, drawn from ``cfg.seed``."""
    rng = np.random.default_rng([cfg.seed, 0])
    params = np.zeros(n_params(cfg.h1, cfg.h2))
    views = _views(params, cfg.h1, cfg.h2)
    for name in ("W1", "W2", "W3"):
        fan_out, fan_in = views[name].shape
        a = math.sqrt(6.0 / (fan_in + fan_out))
        views[name][...] = rng.uniform(-a, a, size=views[name].shape)
    return DynamicsModel(norm, params, cfg.h1, cfg.h2, dict(metadata or {}))


def _forward(v: dict[str, np.ndarray], z: np.ndarray):
    a1 = z @ v["W1"].T + v["b1"]
    r1 = np.maximum(a1, 0.0)
    a2 = r1 @ v["W2"].T + v["b2"]
    r2 = np.maximum(a2, 0.0)
    out = r2 @ v["W3"][0] + v["b3"][0]
    return out, (a1, r1, a2, r2)


def _standardize(norm: NormStats, x: np.ndarray) -> np.ndarray:
    return (x - norm.mean) / norm.sd


def predict(model: DynamicsModel, x) -> np.ndarray | float:
    """Mid-point temperature for input rows (t_hours, w_liters, t0).

    A single 3-vector returns a float; an (n, 3) array returns n values.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite model input")
    single = x.ndim == 1
    z = _standardize(model.norm, np.atleast_2d(x))
    out, _ = _forward(model.layers, z)
    return float(out[0]) if single else out


def _loss_grad_flat(
    params: np.ndarray, h1: int, h2: int, z: np.ndarray, y: np.ndarray, l2_lambda: float,
    wmask: np.ndarray,
) -> tuple[float, np.ndarray]:
    v = _views(params, h1, h2)
    out, (a1, r1, a2, r2) = _forward(v, z)
    resid = out - y
    n = len(y)
    d_out = np.sign(resid) / n  # subgradient of |.| at 0 is 0

    grad = np.empty_like(params)
    g = _views(grad, h1, h2)
    g["W3"][0] = d_out @ r2
    g["b3"][0] = d_out.sum()
    d_a2 = np.outer(d_out, v["W3"][0])
    d_a2 *= a2 > 0
    g["W2"][...] = d_a2.T @ r1
    g["b2"][...] = d_a2.sum(axis=0)
    d_a1 = d_a2 @ v["W2"]
    d_a1 *= a1 > 0
    g["W1"][...] = d_a1.T @ z
    g["b1"][...] = d_a1.sum(axis=0)

    wp = params * wmask
    loss = float(np.abs(resid).mean()) + l2_lambda * float(wp @ wp)
    grad += (2.0 * l2_lambda) * wp
    return loss, grad


def loss_and_grad(
    model: DynamicsModel, examples: Examples, l2_lambda: float
) -> tuple[float, dict[str, np.ndarray]]:
    """MAE + l2_lambda * sum of squared weights, with backprop gradients per layer."""
    if len(examples) == 0:
        raise InsufficientDataError("loss over an empty batch")
    z = _standardize(model.norm, examples.x)
    loss, grad = _loss_grad_flat(
        model.params, model.h1, model.h2, z, examples.y, l2_lambda, _weight_mask(model.h1, model.h2)
    )
    return loss, {k: g.copy() for k, g in _views(grad, model.h1, model.h2).items()}


def _adam_fit(
    params: np.ndarray,
    h1: int,
    h2: int,
    z: np.ndarray,
    y: np.ndarray,
    lr: float,
    epochs: int,
    batch_size: int,
    l2_lambda: float,
    rng: np.random.Generator,
) -> np.ndarray:
    params = params.copy()
    if epochs == 0 or lr == 0.0:
        return params
    m = np.zeros_like(params)
    s = np.zeros_like(params)
    wmask = _weight_mask(h1, h2)
    n = len(y)
    bs = min(batch_size, n)
    t = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        zs, ys = z[order], y[order]
        for lo in range(0, n, bs):
            _, g = _loss_grad_flat(params, h1, h2, zs[lo : lo + bs], ys[lo : lo + bs], l2_lambda, wmask)
            t += 1
            m *= ADAM_BETA1
            m += (1 - ADAM_BETA1) * g
            s *= ADAM_BETA2
            s += (1 - ADAM_BETA2) * (g * g)
            step = lr * math.sqrt(1 - ADAM_BETA2**t) / (1 - ADAM_BETA1**t)
            params -= step * m / (np.sqrt(s) + ADAM_EPS)
    return params


def train(examples: Examples, cfg: TrainConfig, metadata: dict | None = None) -> DynamicsModel:
    """Fit a fresh network; normalization statistics come from ``examples``."""
    if len(examples) == 0:
        raise InsufficientDataError("cannot train on an empty example set")
    norm = compute_norm_stats(examples)
    model = init(cfg, norm, metadata)
    rng = np.random.default_rng([cfg.seed, 1])
    params = _adam_fit(
        model.params, cfg.h1, cfg.h2, _standardize(norm, examples.x), examples.y,
        cfg.lr, cfg.epochs, cfg.batch_size, cfg.l2_lambda, rng,
    )
    meta = {**model.metadata, "n_train": len(examples), "epochs": cfg.epochs, "lr": cfg.lr, "seed": cfg.seed}
    return replace(model, params=params, metadata=meta)


def fine_tune(
    base: DynamicsModel,
    local: Examples,
    cfg: TrainConfig,
    ft: FineTuneConfig,
    metadata: dict | None = None,
) -> DynamicsModel:
    """Continue training ``base`` on local data at reduced rate and budget.

    The optimizer state starts fresh. With ``freeze_norm`` the base
    model's standardization is kept, so local inputs are scaled by source
    statistics.
    """
    if len(local) == 0:
        raise InsufficientDataError("cannot fine-tune on an empty example set")
    norm = base.norm if ft.freeze_norm else compute_norm_stats(local)
    epochs = math.ceil(cfg.epochs * ft.epoch_scale)
    rng = np.random.default_rng([cfg.seed, 2])
    params = _adam_fit(
        base.params, base.h1, base.h2, _standardize(norm, local.x), local.y,
        cfg.lr * ft.lr_scale, epochs, cfg.batch_size, cfg.l2_lambda, rng,
    )
    meta = {
        **(metadata or {}),
        "base": dict(base.metadata),
        "n_finetune": len(local),
        "finetune_epochs": epochs,
        "finetune_lr": cfg.lr * ft.lr_scale,
        "seed": cfg.seed,
    }
    return DynamicsModel(norm, params, base.h1, base.h2, meta)


def evaluate_mae(model: DynamicsModel, holdout: Examples) -> float:
    if len(holdout) == 0:
        raise ValueError("cannot evaluate on an empty holdout set")
    return float(np.abs(predict(model, holdout.x) - holdout.y).mean())


def fold_normalization(model: DynamicsModel) -> tuple[np.ndarray, np.ndarray]:
    """First-layer weights and bias acting on raw inputs."""
    v = model.layers
    w1 = v["W1"] / model.norm.sd
    b1 = v["b1"] - w1 @ model.norm.mean
    return w1, b1


# --- persistence ---------------------------------------------------------

def to_dict(model: DynamicsModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_FORMAT_VERSION,
        "shapes": {name: list(shape) for name, shape in _layout(model.h1, model.h2)},
        "norm": {"mean": model.norm.mean.tolist(), "sd": model.norm.sd.tolist()},
        "params": {name: arr.tolist() for name, arr in model.layers.items()},
        "metadata": model.metadata,
    }


def from_dict(doc: dict) -> DynamicsModel:
    try:
        if doc.get("format") != MODEL_FORMAT:
            raise ModelLoadError(f"unknown model format {doc.get('format')!r}")
        shapes = {k: tuple(v) for k, v in doc["shapes"].items()}
        h1, h2 = shapes["W1"][0], shapes["W2"][0]
        expected = dict(_layout(h1, h2))
        if shapes != expected:
            raise ModelLoadError(f"inconsistent shape header {shapes}")
        parts = []
        for name, shape in _layout(h1, h2):
            arr = np.asarray(doc["params"][name], dtype=float)
            if arr.shape != shape:
                raise ModelLoadError(f"{name}: shape {arr.shape} does not match header {shape}")
            parts.append(arr.ravel())
        norm = NormStats(np.asarray(doc["norm"]["mean"], dtype=float), np.asarray(doc["norm"]["sd"], dtype=float))
        if norm.mean.shape != (N_INPUTS,) or norm.sd.shape != (N_INPUTS,):
            raise ModelLoadError("normalization statistics must be 3-vectors")
        return DynamicsModel(norm, np.concatenate(parts), h1, h2, doc.get("metadata", {}))
    except ModelLoadError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelLoadError(f"malformed model document: {exc}") from exc


def save(model: DynamicsModel, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_dict(model), fh, sort_keys=True)
        fh.write("\n")


def load(path: Path) -> DynamicsModel:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ModelLoadError(f"model file not found: {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelLoadError(f"cannot read model file {path}: {exc}") from exc
    try:
        return from_dict(doc)
    except ModelLoadError as exc:
        raise ModelLoadError(f"{path}: {exc}") from None
