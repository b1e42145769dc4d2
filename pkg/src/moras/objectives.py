"""Objectives of the search.

``f1`` is the clean validation error (percent). ``f2`` is the error under
one randomly drawn attack, expressed as a z-score against the spread of that
attack's error over a set of calibration baselines:
``f2 = (err_attack - mu[attack]) / sigma[attack]``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import genome as G
from .attacks import (ATTACK_KINDS, AttackConfig, AttackKind, BlackBoxCache,
                      default_attack_configs, run_attack)
from .data import Dataset, Splits
from .errors import ConfigError, TrainingDivergence
from .network import Model, predict
from .rng import derive_seed, stream
from .training import TrainConfig, train

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-6
OBJECTIVE2_MODES = ("multi-attack", "fgsm-only", "none")


def error_rate(model: Model, images: np.ndarray, labels: np.ndarray) -> float:
    """Percentage of misclassified images (arg-max, ties to the lowest class)."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("error rate of an empty dataset is undefined")
    correct = int(np.count_nonzero(predict(model, images) == labels))
    return (1.0 - correct / len(labels)) * 100.0


def dataset_error(model: Model, ds: Dataset) -> float:
    return error_rate(model, ds.images.astype(model.dtype, copy=False), ds.labels)


@dataclass(frozen=True)
class ObjectivePair:
    f1: float
    f2: float
    attack_used: AttackKind | None = None
    err_ad: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.f1 <= 100.0:
            raise ValueError(f"f1 must be a percentage, got {self.f1}")

    def to_dict(self) -> dict:
        return {"f1": self.f1, "f2": self.f2, "err_ad": self.err_ad,
                "attack_used": None if self.attack_used is None else self.attack_used.name}


@dataclass
class BaselineStats:
    """Per-attack mean and (population) standard deviation of baseline errors.

    ``raw[baseline_id][attack_name]`` keeps every individual error rate.
    """

    mu: dict[AttackKind, float]
    sigma: dict[AttackKind, float]
    raw: dict[str, dict[str, float]] = field(default_factory=dict)
    clean: dict[str, float] = field(default_factory=dict)
    flagged: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.mu = {AttackKind.parse(k): float(v) for k, v in self.mu.items()}
        self.sigma = {AttackKind.parse(k): max(float(v), SIGMA_FLOOR)
                      for k, v in self.sigma.items()}
        if set(self.mu) != set(ATTACK_KINDS) or set(self.sigma) != set(ATTACK_KINDS):
            raise ConfigError("baseline stats need exactly one entry per attack")

    @property
    def provenance(self) -> list[str]:
        return list(self.raw)

    @classmethod
    def from_errors(cls, raw: dict[str, dict[str, float]],
                    clean: dict[str, float] | None = None) -> "BaselineStats":
        if not raw:
            raise ConfigError("no baseline error rates")
        mu, sigma, flagged = {}, {}, []
        for kind in ATTACK_KINDS:
            errs = np.array([raw[b][kind.name] for b in raw], dtype=np.float64)
            mu[kind] = float(errs.mean())
            sd = float(errs.std())
            if sd < SIGMA_FLOOR:
                flagged.append(kind.name)
                log.warning("baseline spread for %s is degenerate; floored at %g",
                            kind.name, SIGMA_FLOOR)
            sigma[kind] = max(sd, SIGMA_FLOOR)
        return cls(mu, sigma, raw, dict(clean or {}), flagged)

    def z(self, kind: AttackKind, err: float) -> float:
        kind = AttackKind.parse(kind)
        return (err - self.mu[kind]) / self.sigma[kind]

    def to_dict(self) -> dict:
        return {
            "attacks": {k.name: {"mu": self.mu[k], "sigma": self.sigma[k]} for k in ATTACK_KINDS},
            "baselines": self.raw,
            "clean": self.clean,
            "flagged": self.flagged,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineStats":
        attacks = d["attacks"]
        return cls({k: v["mu"] for k, v in attacks.items()},
                   {k: v["sigma"] for k, v in attacks.items()},
                   d.get("baselines", {}), d.get("clean", {}), d.get("flagged", []))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "BaselineStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class EvalSettings:
    """Everything besides the genome that determines an evaluation."""

    num_classes: int
    channels: int = 8
    cells_per_phase: int = 2
    in_channels: int = 1
    train: TrainConfig = TrainConfig()
    attacks: dict = field(default_factory=default_attack_configs)
    objective2: str = "multi-attack"
    debug: bool = False

    def __post_init__(self):
        if self.objective2 not in OBJECTIVE2_MODES:
            raise ConfigError(f"objective2 must be one of {OBJECTIVE2_MODES}")

    def network(self, genes) -> G.NetworkSpec:
        return G.NetworkSpec.from_genome(genes, self.num_classes, channels=self.channels,
                                         cells_per_phase=self.cells_per_phase,
                                         in_channels=self.in_channels)


def train_genome(genes, train_set: Dataset, settings: EvalSettings, seed: int,
                 cfg: TrainConfig | None = None) -> Model:
    cfg = settings.train if cfg is None else cfg
    model = Model(settings.network(genes), seed=derive_seed(seed, "init"))
    train(model, train_set, replace(cfg, seed=derive_seed(seed, "train")))
    return model


def attack_error(model: Model, ds: Dataset, cfg: AttackConfig, rng, substitute=None,
                 cache: BlackBoxCache | None = None) -> float:
    x = ds.images.astype(model.dtype, copy=False)
    x_adv = run_attack(model, x, ds.labels, cfg, rng=rng, substitute=substitute, cache=cache)
    return error_rate(model, x_adv, ds.labels)


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def desk_baselines(n_random: int = 4, seed: int = 0) -> dict[str, np.ndarray]:
    """Hand-written extreme cells plus seeded random genomes."""
    u = G.uniform_cell
    hand = {
        "pool-max": (u(0), u(0)),
        "identity-avg": (u(2), u(1)),
        "sep3-chain": (u(3, chain=True), u(3)),
        "sep7-dil5": (u(6), u(7, chain=True)),
    }
    out = {name: G.encode(n, r) for name, (n, r) in hand.items()}
    for i in range(n_random):
        out[f"random-{i}"] = stream(seed, "baseline", i).random(G.GENOME_LENGTH)
    return out


SUBSTITUTE_GENOME = G.encode(G.uniform_cell(3, chain=True), G.uniform_cell(3, chain=True))


def train_substitute(train_set: Dataset, settings: EvalSettings, seed: int) -> Model:
    """Clean-trained transfer source for the black-box attack."""
    cfg = replace(settings.train, mode="clean")
    return train_genome(SUBSTITUTE_GENOME, train_set, settings, derive_seed(seed, "substitute"), cfg)


def _baseline_errors(args) -> tuple[str, dict, float]:
    name, genes, train_set, val_set, settings, seed, substitute = args
    model = train_genome(genes, train_set, settings, derive_seed(seed, "baseline", name))
    cache = BlackBoxCache()
    errs = {}
    for kind in ATTACK_KINDS:
        rng = stream(seed, "baseline", name, "attack", int(kind))
        errs[kind.name] = attack_error(model, val_set, settings.attacks[kind], rng, substitute, cache)
    return name, errs, dataset_error(model, val_set)


def calibrate_baselines(baselines: dict[str, np.ndarray], splits: Splits, settings: EvalSettings,
                        seed: int = 0, map_fn=map) -> tuple[BaselineStats, Model]:
    """Train every baseline with FastAdv and record its error under each attack.

    Also trains the substitute used by the black-box attack. ``map_fn`` lets
    the caller fan the baselines out over a worker pool.
    """
    if len(baselines) < 4:
        raise ConfigError("calibration needs at least four baselines")
    train_set, val_set = splits.train, splits.val
    substitute = train_substitute(train_set, settings, seed)
    jobs = [(name, genes, train_set, val_set, settings, seed, substitute)
            for name, genes in baselines.items()]
    raw, clean = {}, {}
    for name, errs, clean_err in map_fn(_baseline_errors, jobs):
        raw[name] = errs
        clean[name] = clean_err
    return BaselineStats.from_errors(raw, clean), substitute


# ---------------------------------------------------------------------------
# per-individual evaluation
# ---------------------------------------------------------------------------

def draw_attack(run_seed: int, individual_id: int, mode: str = "multi-attack") -> AttackKind | None:
    if mode == "none":
        return None
    if mode == "fgsm-only":
        return AttackKind.FGSM
    i = int(stream(run_seed, individual_id, "attack-choice").integers(len(ATTACK_KINDS)))
    return ATTACK_KINDS[i]


def evaluate_individual(genes, splits: Splits, stats: BaselineStats | None,
                        settings: EvalSettings, run_seed: int, individual_id: int,
                        substitute: Model | None = None,
                        cache: BlackBoxCache | None = None) -> ObjectivePair:
    """Train on the training split, then score on the validation split.

    The attack is drawn uniformly from the five kinds using the individual's
    own stream, so the result does not depend on evaluation order.
    """
    seed = derive_seed(run_seed, "individual", individual_id)
    train_set = splits.train
    try:
        model = train_genome(genes, train_set, settings, seed)
    except TrainingDivergence as exc:
        raise exc.with_genome(individual_id) from None
    val_set = splits.val
    f1 = dataset_error(model, val_set)
    kind = draw_attack(run_seed, individual_id, settings.objective2)
    if settings.debug and "test" in splits.accessed:
        raise AssertionError("evaluation touched the test split")
    if kind is None:
        return ObjectivePair(f1, 0.0)
    if stats is None:
        raise ConfigError("baseline statistics are required for the robustness objective")
    rng = stream(run_seed, individual_id, "attack", int(kind))
    err = attack_error(model, val_set, settings.attacks[kind], rng, substitute, cache)
    return ObjectivePair(f1, stats.z(kind, err), kind, err)


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ["model", "params", "clean"] + [k.label for k in ATTACK_KINDS] + ["robustness"]


def aggregate_robustness(acc: dict[AttackKind, float], stats: BaselineStats) -> float:
    """Sum over attacks of accuracy z-scores (accuracy mean = 100 - error mean)."""
    total = 0.0
    for kind, a in acc.items():
        kind = AttackKind.parse(kind)
        total += (a - (100.0 - stats.mu[kind])) / stats.sigma[kind]
    return total


def robustness_report(model: Model, ds: Dataset, stats: BaselineStats, substitute: Model | None,
                      attacks: dict | None = None, seed: int = 0, name: str = "model") -> dict:
    """Clean accuracy, accuracy under every attack, and the aggregate score."""
    attacks = attacks or default_attack_configs()
    row = {"model": name, "params": model.num_params, "clean": 100.0 - dataset_error(model, ds)}
    acc = {}
    cache = BlackBoxCache()
    for kind in ATTACK_KINDS:
        rng = stream(seed, "report", name, int(kind))
        acc[kind] = 100.0 - attack_error(model, ds, attacks[kind], rng, substitute, cache)
        row[kind.label] = acc[kind]
    row["robustness"] = aggregate_robustness(acc, stats)
    return row


def report_markdown(rows: Sequence[dict], header: str = "") -> str:
    lines = [header, ""] if header else []
    lines.append("| " + " | ".join(REPORT_COLUMNS) + " |")
    lines.append("|" + "---|" * len(REPORT_COLUMNS))
    for row in rows:
        cells = []
        for col in REPORT_COLUMNS:
            v = row[col]
            cells.append(f"{v:.2f}" if isinstance(v, float) else str(v))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def report_csv(rows: Sequence[dict]) -> str:
    import csv
    import io
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k])
                         for k in REPORT_COLUMNS})
    return buf.getvalue()
