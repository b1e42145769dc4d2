"""L-infinity adversarial attacks: FGSM, BIM, PGD, FFGSM and a transfer
(black-box) FGSM computed on a substitute model.

All attacks keep their output inside the valid pixel range [0, 1] in addition
to the epsilon ball around the clean input, and treat ``sign(0)`` as 0.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, NumericError
from .network import Model, loss_and_input_grad
from .rng import stream


class AttackKind(enum.IntEnum):
    FGSM = 1
    BIM = 2
    PGD = 3
    FFGSM = 4
    BLK_FGSM = 5

    @classmethod
    def parse(cls, value) -> "AttackKind":
        if isinstance(value, cls):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        key = str(value).strip().upper().replace("-", "_")
        aliases = {"BLK": "BLK_FGSM", "FGSM_B": "BLK_FGSM", "BLACKBOX": "BLK_FGSM"}
        try:
            return cls[aliases.get(key, key)]
        except KeyError:
            raise ConfigError(f"unknown attack {value!r}") from None

    @property
    def label(self) -> str:
        return {"BLK_FGSM": "Blk-FGSM"}.get(self.name, self.name)


ATTACK_KINDS = tuple(AttackKind)


@dataclass(frozen=True)
class AttackConfig:
    kind: AttackKind
    epsilon: float
    alpha: float | None = None
    iterations: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind.parse(self.kind))
        if not self.epsilon > 0:
            raise ConfigError(f"{self.kind.name}: epsilon must be positive")
        if self.kind in (AttackKind.BIM, AttackKind.PGD) and self.iterations < 1:
            raise ConfigError(f"{self.kind.name}: iterations must be >= 1")
        if self.kind in (AttackKind.BIM, AttackKind.PGD, AttackKind.FFGSM):
            if self.alpha is None or self.alpha < 0:
                raise ConfigError(f"{self.kind.name}: needs a non-negative alpha")

    def to_dict(self) -> dict:
        return {"kind": self.kind.name, "epsilon": self.epsilon, "alpha": self.alpha,
                "iterations": self.iterations, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(**d)


def default_attack_configs(seed: int = 0) -> dict[AttackKind, AttackConfig]:
    """Per-attack budgets and step sizes used throughout the search."""
    return {
        AttackKind.FGSM: AttackConfig(AttackKind.FGSM, 8 / 255, seed=seed),
        AttackKind.BIM: AttackConfig(AttackKind.BIM, 8 / 255, 2 / 255, 7, seed),
        AttackKind.PGD: AttackConfig(AttackKind.PGD, 8 / 255, 2 / 255, 7, seed),
        AttackKind.FFGSM: AttackConfig(AttackKind.FFGSM, 8 / 255, 12 / 255, 1, seed),
        AttackKind.BLK_FGSM: AttackConfig(AttackKind.BLK_FGSM, 0.007, seed=seed),
    }


BATCH = 128


def _grad_sign(model: Model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    for i in range(0, len(x), BATCH):
        _, g = loss_and_input_grad(model, x[i:i + BATCH], y[i:i + BATCH])
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite input gradient in attack")
        out[i:i + BATCH] = np.sign(g)
    return out


def _inputs(model: Model, x, y):
    x = np.asarray(x, dtype=model.dtype)
    if x.min(initial=0.0) < 0 or x.max(initial=0.0) > 1:
        raise ValueError("attack inputs must lie in [0, 1]")
    return x, np.asarray(y, dtype=np.int64)


def _project(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    eps = x.dtype.type(eps)
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0, 1)


def _rng(cfg: AttackConfig, rng):
    return rng if rng is not None else stream(cfg.seed, "attack", int(cfg.kind))


def _random_start(x: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
    noise = rng.uniform(-eps, eps, size=x.shape).astype(x.dtype)
    return np.clip(x + noise, 0, 1)


def fgsm(model: Model, x, y, cfg: AttackConfig) -> np.ndarray:
    """One signed-gradient step of size epsilon."""
    x, y = _inputs(model, x, y)
    return np.clip(x + x.dtype.type(cfg.epsilon) * _grad_sign(model, x, y), 0, 1)


def bim(model: Model, x, y, cfg: AttackConfig) -> np.ndarray:
    """Iterated FGSM with step alpha, clipped to the epsilon box each step."""
    x, y = _inputs(model, x, y)
    alpha = x.dtype.type(cfg.alpha)
    x_adv = x.copy()
    for _ in range(cfg.iterations):
        x_adv = _project(x_adv + alpha * _grad_sign(model, x_adv, y), x, cfg.epsilon)
    return x_adv


def pgd(model: Model, x, y, cfg: AttackConfig, rng: np.random.Generator | None = None):
    """BIM from a uniformly random start inside the epsilon ball."""
    x, y = _inputs(model, x, y)
    alpha = x.dtype.type(cfg.alpha)
    x_adv = _random_start(x, cfg.epsilon, _rng(cfg, rng))
    for _ in range(cfg.iterations):
        x_adv = _project(x_adv + alpha * _grad_sign(model, x_adv, y), x, cfg.epsilon)
    return x_adv


def ffgsm(model: Model, x, y, cfg: AttackConfig, rng: np.random.Generator | None = None):
    """Single step of size alpha from a random start, then projection."""
    x, y = _inputs(model, x, y)
    x0 = _random_start(x, cfg.epsilon, _rng(cfg, rng))
    return _project(x0 + x.dtype.type(cfg.alpha) * _grad_sign(model, x0, y), x, cfg.epsilon)


class BlackBoxCache:
    """Write-once store of transfer examples keyed by substitute and inputs."""

    def __init__(self):
        self._store: dict[str, np.ndarray] = {}

    @staticmethod
    def key(substitute: Model, x: np.ndarray, y: np.ndarray, eps: float) -> str:
        h = hashlib.sha256()
        for p in substitute.params:
            h.update(p.data.tobytes())
        h.update(np.ascontiguousarray(x).tobytes())
        h.update(np.asarray(y, dtype=np.int64).tobytes())
        h.update(repr(float(eps)).encode())
        return h.hexdigest()

    def get(self, key: str):
        return self._store.get(key)

    def put(self, key: str, value: np.ndarray) -> None:
        if key not in self._store:
            value = value.copy()
            value.setflags(write=False)
            self._store[key] = value

    def __len__(self) -> int:
        return len(self._store)


def blk_fgsm(substitute: Model | None, x, y, cfg: AttackConfig,
             cache: BlackBoxCache | None = None) -> np.ndarray:
    """FGSM computed on ``substitute``; the target model is never queried."""
    if substitute is None:
        raise ConfigError("the black-box attack needs a trained substitute model")
    x, y = _inputs(substitute, x, y)
    if cache is None:
        return fgsm(substitute, x, y, cfg)
    key = BlackBoxCache.key(substitute, x, y, cfg.epsilon)
    hit = cache.get(key)
    if hit is None:
        cache.put(key, fgsm(substitute, x, y, cfg))
        hit = cache.get(key)
    return hit.copy()


def run_attack(model: Model, x, y, cfg: AttackConfig, rng: np.random.Generator | None = None,
               substitute: Model | None = None, cache: BlackBoxCache | None = None):
    """Dispatch on ``cfg.kind``."""
    kind = cfg.kind
    if kind is AttackKind.FGSM:
        return fgsm(model, x, y, cfg)
    if kind is AttackKind.BIM:
        return bim(model, x, y, cfg)
    if kind is AttackKind.PGD:
        return pgd(model, x, y, cfg, rng)
    if kind is AttackKind.FFGSM:
        return ffgsm(model, x, y, cfg, rng)
    return blk_fgsm(substitute, x, y, cfg, cache)


def with_overrides(cfg: AttackConfig, **changes) -> AttackConfig:
    return replace(cfg, **{k: v for k, v in changes.items() if v is not None})
