"""SGD training with a triangular cyclic learning rate, either on clean
batches or with FGSM-from-random-start perturbations (FastAdv)."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigError, NumericError, TrainingDivergence
from .network import Model, loss_and_input_grad, loss_and_param_grad, predict
from .rng import stream

log = logging.getLogger(__name__)

MODES = ("fastadv", "clean")


@dataclass(frozen=True)
class TrainConfig:
    """Training hyper-parameters.

    ``train_alpha`` defaults to 1.25 * ``train_epsilon``. ``acc_samples``
    bounds how many training images are used for the per-epoch clean
    accuracy in the history (0 means all of them). ``grad_clip`` rescales
    the global gradient norm of each step down to at most that value;
    ``None`` disables it.
    """

    epochs: int = 8
    batch_size: int = 32
    max_lr: float = 0.1
    momentum: float = 0.0
    grad_clip: float | None = 2.0
    train_epsilon: float = 8 / 255
    train_alpha: float | None = None
    seed: int = 0
    mode: str = "fastadv"
    acc_samples: int = 256
    debug: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.max_lr > 0:
            raise ConfigError("max_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.train_epsilon < 0:
            raise ConfigError("train_epsilon must be non-negative")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive or None")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")

    @property
    def alpha(self) -> float:
        return 1.25 * self.train_epsilon if self.train_alpha is None else self.train_alpha

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainResult:
    model: Model
    history: list[dict] = field(default_factory=list)

    def history_jsonl(self) -> str:
        return "".join(json.dumps(row) + "\n" for row in self.history)


def cyclic_lr(step: int, total_steps: int, max_lr: float) -> float:
    """Triangular schedule: 0 -> max_lr at the midpoint -> 0 at the end."""
    if not 0 <= step <= total_steps or total_steps <= 0:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    half = total_steps / 2
    return max_lr * (step / half if step <= half else (total_steps - step) / half)


def _accuracy(model: Model, images: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(model, images) == labels) * 100.0)


def train(model: Model, train_set: Dataset, cfg: TrainConfig) -> TrainResult:
    """Train ``model`` in place and return it with a per-epoch history."""
    if len(train_set) == 0:
        raise ConfigError("empty training set")
    images = train_set.images.astype(model.dtype, copy=False)
    labels = train_set.labels
    n = len(labels)
    steps_per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    eps = model.dtype.type(cfg.train_epsilon)
    alpha = model.dtype.type(cfg.alpha)
    adversarial = cfg.mode == "fastadv" and cfg.train_epsilon > 0
    delta_rng = stream(cfg.seed, "train", "delta")
    acc_idx = np.arange(n)
    if cfg.acc_samples and n > cfg.acc_samples:
        acc_idx = np.sort(stream(cfg.seed, "train", "acc").permutation(n)[:cfg.acc_samples])
    velocity = [np.zeros_like(p.data) for p in model.params] if cfg.momentum else None

    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, "train", "shuffle", epoch).permutation(n)
        losses = []
        lr = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x, y = images[idx], labels[idx]
            try:
                if adversarial:
                    delta = delta_rng.uniform(-eps, eps, size=x.shape).astype(x.dtype)
                    _, g = loss_and_input_grad(model, np.clip(x + delta, 0, 1), y)
                    delta = np.clip(delta + alpha * np.sign(g), -eps, eps)
                    if cfg.debug:
                        assert np.abs(delta).max(initial=0) <= eps
                    x = np.clip(x + delta, 0, 1)
                loss, grads = loss_and_param_grad(model, x, y)
            except NumericError:
                raise TrainingDivergence(epoch, b, float("nan")) from None
            if not np.isfinite(loss):
                raise TrainingDivergence(epoch, b, loss)
            lr = cyclic_lr(step, total, cfg.max_lr)
            lr_t = model.dtype.type(lr)
            if cfg.grad_clip is not None:
                norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))
                if norm > cfg.grad_clip:
                    scale = model.dtype.type(cfg.grad_clip / norm)
                    grads = [g * scale for g in grads]
            for i, (p, g) in enumerate(zip(model.params, grads)):
                if velocity is not None:
                    velocity[i] = cfg.momentum * velocity[i] + g
                    g = velocity[i]
                p.data -= lr_t * g
            losses.append(loss)
            step += 1
        row = {
            "epoch": epoch,
            "lr": lr,
            "loss": float(np.mean(losses)),
            "clean_acc": _accuracy(model, images[acc_idx], labels[acc_idx]),
        }
        history.append(row)
        log.debug("epoch %d: %s", epoch, row)
    return TrainResult(model, history)


def train_fastadv(model: Model, train_set: Dataset, cfg: TrainConfig) -> TrainResult:
    return train(model, train_set, _with_mode(cfg, "fastadv"))


def train_clean(model: Model, train_set: Dataset, cfg: TrainConfig) -> TrainResult:
    return train(model, train_set, _with_mode(cfg, "clean"))


def _with_mode(cfg: TrainConfig, mode: str) -> TrainConfig:
    from dataclasses import replace
    return cfg if cfg.mode == mode else replace(cfg, mode=mode)
