"""Training loop, checkpointing and synthetic data.

Randomness is derived from the run seed plus counters: the shuffle for epoch
``e`` comes from ``default_rng([seed, e])`` and augmentation for a batch from
``default_rng([seed, e, step])``. A checkpoint therefore only needs the epoch
and step counters (plus momentum buffers) to resume bit-identically.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .geocell import PartitionStack, build_stack
from .inference import predict_batch, resize_bilinear, resize_size
from .model import ConfigError, GeoDecoderModel, ModelConfig, loss

log = logging.getLogger(__name__)


class ResumeError(ValueError):
    """A checkpoint does not belong to the current run."""


@dataclass
class TrainSettings:
    epochs: int = 40
    batch_size: int = 512
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: tuple[int, ...] = nx.DEFAULT_MILESTONES
    gamma: float = 0.5
    augment: bool = False
    seed: int = 0
    max_steps: int | None = None


@dataclass
class TrainState:
    epoch: int = 0  # completed epochs
    step: int = 0  # completed optimizer steps
    optim: nx.OptimizerState = field(default_factory=nx.OptimizerState)


def effective_batch(batch_size: int, n: int) -> int:
    """Configured batch size, reduced to the dataset size for small sets."""
    return max(1, min(batch_size, n))


def augment_batch(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Resize up, take a random crop of the original size and mirror half the images."""
    b, c, h, w = x.shape
    r = resize_size(h)
    out = np.empty_like(x)
    for i in range(b):
        big = resize_bilinear(x[i], r, r)
        y0, x0 = rng.integers(0, r - h + 1), rng.integers(0, r - w + 1)
        crop = big[:, y0:y0 + h, x0:x0 + w]
        out[i] = crop[:, :, ::-1] if rng.random() < 0.5 else crop
    return out


def train(model: GeoDecoderModel, inputs: np.ndarray, labels: np.ndarray, scenes: np.ndarray,
          settings: TrainSettings, state: TrainState | None = None, on_step=None, on_epoch=None) -> TrainState:
    """Run momentum SGD until ``settings.epochs`` epochs (or ``max_steps`` steps) are complete.

    ``on_step(state, loss_value)`` runs after every optimizer step and
    ``on_epoch(state)`` after every completed epoch.
    """
    n = inputs.shape[0]
    if labels.shape != (n, model.config.H):
        raise ConfigError(f"labels must be [{n}, {model.config.H}], got {labels.shape}")
    if state is None:
        state = TrainState(optim=nx.OptimizerState(
            learning_rate=settings.lr, momentum=settings.momentum, weight_decay=settings.weight_decay,
            milestones=tuple(settings.milestones), gamma=settings.gamma))
    batch = effective_batch(settings.batch_size, n)
    steps_per_epoch = math.ceil(n / batch)
    named = list(model.named_parameters())
    while state.epoch < settings.epochs:
        state.optim.set_epoch(state.epoch)
        order = np.random.default_rng([settings.seed, state.epoch]).permutation(n)
        first = state.step - state.epoch * steps_per_epoch
        for k in range(first, steps_per_epoch):
            if settings.max_steps is not None and state.step >= settings.max_steps:
                return state
            idx = order[k * batch:(k + 1) * batch]
            x = inputs[idx]
            if settings.augment and x.ndim == 4:
                x = augment_batch(x, np.random.default_rng([settings.seed, state.epoch, state.step]))
            model.zero_grad()
            value = loss(model(x), labels[idx], scenes[idx] if model.config.S > 0 else None)
            nx.backward(value)
            nx.sgd_step(named, state.optim)
            state.step += 1
            if on_step is not None:
                on_step(state, value.item())
        state.epoch += 1
        if on_epoch is not None:
            on_epoch(state)
    return state


# -- checkpoints -----------------------------------------------------------------------

def save_training_checkpoint(path, model: GeoDecoderModel, state: TrainState, meta: dict) -> Path:
    info = {"epoch": state.epoch, "step": state.step, "learning_rate": state.optim.learning_rate,
            "initial_lr": state.optim.initial_lr, "momentum": state.optim.momentum,
            "weight_decay": state.optim.weight_decay, "milestones": list(state.optim.milestones),
            "gamma": state.optim.gamma, "rng": "counter:[seed,epoch]/[seed,epoch,step]", **meta}
    return nx.save_checkpoint(path, model.state_dict(), model.config.to_dict(), info,
                              buffers=state.optim.momentum_buffers)


def load_model(path) -> tuple[GeoDecoderModel, dict, dict[str, np.ndarray]]:
    params, meta, buffers = nx.load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    model = GeoDecoderModel(cfg)
    model.load_state_dict(params)
    return model, meta, buffers


def resume_state(meta: dict, buffers: dict[str, np.ndarray]) -> TrainState:
    optim = nx.OptimizerState(learning_rate=meta["learning_rate"], momentum=meta["momentum"],
                              weight_decay=meta["weight_decay"], milestones=tuple(meta["milestones"]),
                              gamma=meta["gamma"], initial_lr=meta["initial_lr"],
                              momentum_buffers={k: v.copy() for k, v in buffers.items()})
    return TrainState(epoch=int(meta["epoch"]), step=int(meta["step"]), optim=optim)


def check_resume(meta: dict, partition_sha256: str) -> None:
    if meta.get("partition_sha256") != partition_sha256:
        raise ResumeError(f"checkpoint was trained against partition {meta.get('partition_sha256')}, "
                          f"current partition is {partition_sha256}")


# -- evaluation helpers ------------------------------------------------------------------------

def finest_accuracy(model: GeoDecoderModel, stack: PartitionStack, inputs: np.ndarray, labels: np.ndarray,
                    batch_size: int = 256) -> float:
    """Fraction of items whose composed prediction equals their finest-level label."""
    hits = 0
    with nx.no_grad():
        for lo in range(0, inputs.shape[0], batch_size):
            preds = predict_batch(inputs[lo:lo + batch_size], model, stack)
            hits += sum(p.fine_class == int(t) for p, t in zip(preds, labels[lo:lo + batch_size, -1]))
    return hits / max(inputs.shape[0], 1)


# -- synthetic data ---------------------------------------------------------------------------

SYNTH_CENTRES = ((10.0, 10.0), (-10.0, -10.0), (10.0, 80.0), (-10.0, 100.0))


@dataclass
class SyntheticSet:
    lat: np.ndarray
    lon: np.ndarray
    scenes: np.ndarray
    inputs: np.ndarray
    cluster: np.ndarray


def synthetic_dataset(n: int = 64, num_scenes: int = 2, kind: str = "image", image_size: int = 16,
                      tokens: int = 4, token_dim: int = 8, noise: float = 0.3, spread_deg: float = 0.5,
                      seed: int = 0) -> SyntheticSet:
    """Images (or token sets) whose appearance depends on location cluster and scene.

    Points come from four clusters, two on each of two cube faces, so a stack
    with ``t_max = [n // 2 + 8, n // 2 - 8]`` has 2 coarse and 4 fine classes.
    """
    rng = np.random.default_rng(seed)
    cluster = np.arange(n) % len(SYNTH_CENTRES)
    centres = np.array(SYNTH_CENTRES)[cluster]
    lat = centres[:, 0] + rng.normal(0.0, spread_deg, n)
    lon = centres[:, 1] + rng.normal(0.0, spread_deg, n)
    scenes = rng.integers(0, max(num_scenes, 1), n)
    shape = (3, image_size, image_size) if kind == "image" else (tokens, token_dim)
    cluster_pattern = rng.normal(size=(len(SYNTH_CENTRES), *shape))
    scene_pattern = rng.normal(size=(max(num_scenes, 1), *shape))
    inputs = cluster_pattern[cluster] + scene_pattern[scenes] + noise * rng.normal(size=(n, *shape))
    return SyntheticSet(lat, lon, scenes, inputs, cluster)


def synthetic_stack(data: SyntheticSet) -> PartitionStack:
    n = data.lat.size
    return build_stack(np.c_[data.lat, data.lon], [n // 2 + 8, n // 2 - 8], t_min=2)


class LossLog:
    """Append-only JSONL writer for per-step loss records."""

    def __init__(self, path, extra: dict | None = None):
        self.path = Path(path)
        self.extra = extra or {}

    def __call__(self, state: TrainState, value: float) -> None:
        rec = {"epoch": state.epoch, "step": state.step, "loss": value,
               "lr": state.optim.learning_rate, **self.extra}
        with self.path.open("a") as fh:
            fh.write(json.dumps(rec) + "\n")
