"""End-to-end pipeline: calibrate, search, retrain, attack-eval and report.

Every stage reads a :class:`RunConfig`, writes its artifacts under the run
directory and refreshes ``manifest.json`` (SHA-256 of every artifact). Stages
are deterministic given the config: nothing time-dependent is written to
disk, and BLAS is pinned to one thread inside every evaluation so results do
not depend on the worker count.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import multiprocessing as mp
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
from threadpoolctl import threadpool_limits

from . import data as D
from .attacks import (AttackConfig, AttackKind, BlackBoxCache, default_attack_configs,
                      run_attack)
from .data import Dataset, Splits, SyntheticSpec
from .errors import ConfigError
from .genome import GENOME_LENGTH, decode
from .moea import NSGA2, EvoConfig, Individual, fast_nondominated_sort
from .network import Model, load_model
from .objectives import (OBJECTIVE2_MODES, BaselineStats, EvalSettings, calibrate_baselines,
                         desk_baselines, error_rate, evaluate_individual, report_csv,
                         report_markdown, robustness_report, train_genome)
from .rng import derive_seed, stream
from .training import TrainConfig

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DataConfig:
    """Dataset source: an MDS/CSV ``path`` or, if absent, synthetic data."""

    path: str | None = None
    synthetic: dict = field(default_factory=dict)
    fractions: tuple[float, float, float] = D.DESK_FRACTIONS
    seed: int = 0

    def synthetic_spec(self) -> SyntheticSpec:
        spec = dict(self.synthetic)
        if "contrast" in spec:
            spec["contrast"] = tuple(spec["contrast"])
        return SyntheticSpec(**spec)


@dataclass(frozen=True)
class RunConfig:
    """One JSON document describing a whole run."""

    seed: int = 0
    threads: int = 1
    out: str = "runs/desk"
    data: DataConfig = DataConfig()
    channels: int = 8
    cells_per_phase: int = 2
    evo: EvoConfig = EvoConfig()
    search_train: TrainConfig = TrainConfig()
    final_train: TrainConfig = TrainConfig(epochs=20)
    attacks: dict = field(default_factory=dict)
    objective2: str = "multi-attack"
    calibration_random: int = 4
    calibration_dir: str | None = None
    debug: bool = False

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.objective2 not in OBJECTIVE2_MODES:
            raise ConfigError(f"objective2 must be one of {OBJECTIVE2_MODES}")
        if self.calibration_random < 0:
            raise ConfigError("calibration_random must be >= 0")
        if len(self.data.fractions) != 3:
            raise ConfigError("data.fractions needs three entries (train, val, test)")
        self.attack_configs()  # validates the overrides

    # -- derived pieces -------------------------------------------------

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def attack_configs(self) -> dict[AttackKind, AttackConfig]:
        cfgs = default_attack_configs(self.seed)
        for key, override in self.attacks.items():
            kind = AttackKind.parse(key)
            unknown = set(override) - {"epsilon", "alpha", "iterations"}
            if unknown:
                raise ConfigError(f"attacks.{key}: unknown fields {sorted(unknown)}")
            cfgs[kind] = replace(cfgs[kind], **override)
        return cfgs

    def settings(self, num_classes: int, in_channels: int, train: TrainConfig | None = None,
                 ) -> EvalSettings:
        return EvalSettings(num_classes, self.channels, self.cells_per_phase, in_channels,
                            self.search_train if train is None else train,
                            self.attack_configs(), self.objective2, self.debug)

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"]["fractions"] = list(self.data.fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "data" in d:
                dd = dict(d["data"])
                if "fractions" in dd:
                    dd["fractions"] = tuple(dd["fractions"])
                d["data"] = DataConfig(**dd)
            if "evo" in d:
                d["evo"] = EvoConfig(**d["evo"])
            for key in ("search_train", "final_train"):
                if key in d:
                    d[key] = TrainConfig(**{**_train_defaults(key), **d[key]})
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw)

    def with_overrides(self, seed=None, threads=None, out=None) -> "RunConfig":
        changes = {k: v for k, v in (("seed", seed), ("threads", threads), ("out", out))
                   if v is not None}
        return replace(self, **changes)


def _train_defaults(key: str) -> dict:
    return asdict(TrainConfig(epochs=20)) if key == "final_train" else {}


def _evo(cfg: RunConfig) -> EvoConfig:
    return replace(cfg.evo, seed=cfg.seed)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_atomic(path: Path, text: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(text, str):
        tmp.write_text(text)
    else:
        tmp.write_bytes(text)
    os.replace(tmp, path)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(run_dir: Path) -> dict[str, str]:
    """Hash every artifact under ``run_dir`` into ``manifest.json``."""
    entries = {}
    for path in sorted(run_dir.rglob("*")):
        if path.is_file() and path.name != MANIFEST and not path.name.endswith(".tmp"):
            entries[path.relative_to(run_dir).as_posix()] = _sha256(path)
    _write_atomic(run_dir / MANIFEST, _dump({"artifacts": entries}))
    return entries


def _save_config(cfg: RunConfig) -> None:
    _write_atomic(cfg.out_dir / "config.json", _dump(cfg.to_dict()))


@contextmanager
def _stage(name: str):
    t0 = time.perf_counter()
    log.info("%s: started", name)
    yield
    log.info("%s: finished in %.1f s", name, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def load_dataset(cfg: DataConfig) -> Dataset:
    if cfg.path is None:
        return D.generate_synthetic(cfg.synthetic_spec(), seed=cfg.seed)
    path = Path(cfg.path)
    if not path.exists():
        raise ConfigError(f"dataset not found: {path}")
    return D.load(path)


def load_splits(cfg: RunConfig) -> Splits:
    return Splits.from_dataset(load_dataset(cfg.data), cfg.data.fractions, cfg.data.seed)


# ---------------------------------------------------------------------------
# worker pool
# ---------------------------------------------------------------------------

_WORKER: dict[str, Any] = {}


def _init_worker(state: dict) -> None:
    _WORKER.clear()
    _WORKER.update(state)
    _WORKER["cache"] = BlackBoxCache()


def _call(fn_args):
    fn, args = fn_args
    with threadpool_limits(1):
        return fn(args)


class _Pool:
    """Order-preserving map over ``threads`` forked workers (inline when 1)."""

    def __init__(self, threads: int, state: dict | None = None):
        self.threads = threads
        self.state = state or {}
        self._pool = None

    def __enter__(self):
        _init_worker(self.state)
        if self.threads > 1:
            ctx = mp.get_context("fork" if "fork" in mp.get_all_start_methods() else "spawn")
            self._pool = ctx.Pool(self.threads, initializer=_init_worker, initargs=(self.state,))
        return self

    def __exit__(self, *exc):
        if self._pool is not None:
            self._pool.close()
            self._pool.join()
        _WORKER.clear()

    def map(self, fn, items):
        jobs = [(fn, item) for item in items]
        if self._pool is None:
            return [_call(j) for j in jobs]
        return self._pool.map(_call, jobs, chunksize=1)


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------

def _calibration_dir(cfg: RunConfig) -> Path:
    return Path(cfg.calibration_dir) if cfg.calibration_dir else cfg.out_dir / "calibration"


def cmd_calibrate(cfg: RunConfig) -> BaselineStats:
    """Train the calibration baselines and the black-box substitute."""
    splits = load_splits(cfg)
    ds = splits.train
    settings = cfg.settings(ds.class_count, ds.shape[0])
    baselines = desk_baselines(cfg.calibration_random, seed=cfg.seed)
    out = cfg.out_dir / "calibration"
    with _stage("calibrate"), threadpool_limits(1), _Pool(cfg.threads) as pool:
        stats, substitute = calibrate_baselines(baselines, splits, settings, cfg.seed, pool.map)
    out.mkdir(parents=True, exist_ok=True)
    _save_config(cfg)
    stats.save(out / "stats.json")
    substitute.save(out / "substitute.npz", meta={"role": "substitute"})
    _write_atomic(out / "baselines.json",
                  _dump({name: [float(g) for g in genes] for name, genes in baselines.items()}))
    write_manifest(cfg.out_dir)
    return stats


def load_calibration(cfg: RunConfig) -> tuple[BaselineStats, Model]:
    cal = _calibration_dir(cfg)
    stats_path, sub_path = cal / "stats.json", cal / "substitute.npz"
    if not stats_path.exists() or not sub_path.exists():
        raise ConfigError(f"no calibration found in {cal}; run `moras calibrate` first")
    substitute, _ = load_model(sub_path)
    return BaselineStats.load(stats_path), substitute


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------

def _evaluate_job(args) -> dict:
    ind_id, genes = args
    w = _WORKER
    pair = evaluate_individual(np.asarray(genes), w["splits"], w["stats"], w["settings"],
                               w["seed"], ind_id, w["substitute"], w["cache"])
    return pair.to_dict()


def _search_fingerprint(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    for key in ("threads", "out", "final_train"):
        d.pop(key)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def cmd_search(cfg: RunConfig, stop_after: int | None = None) -> list[Individual]:
    """Run (or resume) the evolutionary search; returns the final archive.

    ``stop_after`` halts after that generation index, leaving a resumable
    checkpoint (used to test interruption).
    """
    stats, substitute = load_calibration(cfg)
    splits = load_splits(cfg)
    ds = splits._train
    settings = cfg.settings(ds.class_count, ds.shape[0])
    out = cfg.out_dir / "search"
    out.mkdir(parents=True, exist_ok=True)
    _save_config(cfg)
    state_path, snap_path = out / "state.json", out / "snapshots.jsonl"
    fingerprint = _search_fingerprint(cfg)

    state = {"splits": splits, "stats": stats, "settings": settings, "seed": cfg.seed,
             "substitute": substitute}
    with _stage("search"), threadpool_limits(1), _Pool(cfg.threads, state) as pool:
        def evaluate(inds: list[Individual]) -> None:
            results = pool.map(_evaluate_job, [(ind.id, ind.genome.tolist()) for ind in inds])
            for ind, res in zip(inds, results):
                ind.set_objectives(res["f1"], res["f2"])
                ind.info.update(attack=res["attack_used"], err_ad=res["err_ad"])

        algo = NSGA2(_evo(cfg), GENOME_LENGTH, evaluate)
        lines: list[str] = []
        if state_path.exists():
            saved = json.loads(state_path.read_text())
            if saved.get("fingerprint") != fingerprint:
                raise ConfigError(f"{state_path} belongs to a different configuration; "
                                  "use a fresh --out directory")
            algo.restore(saved["algorithm"])
            lines = snap_path.read_text().splitlines()[:algo.generation + 1]
            algo.history = [json.loads(line) for line in lines]
            log.info("resuming after generation %d", algo.generation)
        _write_atomic(snap_path, "".join(line + "\n" for line in lines))

        def checkpoint(record: dict) -> None:
            with open(snap_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            _write_atomic(state_path, _dump({"fingerprint": fingerprint,
                                             "algorithm": algo.state()}))
            log.info("generation %d: archive %d, HV(frozen) %.4f", record["generation"],
                     len(record["archive"]), record["hv_archive_frozen"])

        archive = algo.run(checkpoint, stop_after)
    if algo.done:
        _write_atomic(out / "archive.json", _dump([_archive_entry(ind) for ind in archive]))
    write_manifest(cfg.out_dir)
    return archive


def _archive_entry(ind: Individual) -> dict:
    normal, reduction = decode(ind.genome)
    return ind.to_dict() | {"normal": [list(map(list, p)) for p in normal.nodes],
                            "reduction": [list(map(list, p)) for p in reduction.nodes]}


def load_archive(cfg: RunConfig) -> list[Individual]:
    path = cfg.out_dir / "search" / "archive.json"
    if not path.exists():
        raise ConfigError(f"no finished search in {cfg.out_dir}; run `moras search` first")
    return [Individual.from_dict(d) for d in json.loads(path.read_text())]


# ---------------------------------------------------------------------------
# retrain
# ---------------------------------------------------------------------------

RETRAIN_HEADER = ("Final models retrained with FastAdv on the training and validation "
                  "splits together, evaluated on the held-out test split. Accuracies in %.")


def _retrain_job(args) -> dict:
    ind_id, genes, model_path = args
    w = _WORKER
    cfg: RunConfig = w["cfg"]
    full, test = w["full"], w["test"]
    settings = cfg.settings(full.class_count, full.shape[0], cfg.final_train)
    seed = derive_seed(cfg.seed, "retrain", ind_id)
    model = train_genome(np.asarray(genes), full, settings, seed, cfg.final_train)
    model.save(model_path, meta={"genome_id": ind_id, "genome": list(genes)})
    row = robustness_report(model, test, w["stats"], w["substitute"], settings.attacks,
                            seed=derive_seed(cfg.seed, "report"), name=f"moras-{ind_id}")
    return row


def cmd_retrain(cfg: RunConfig) -> list[dict]:
    """Retrain every archive member on train+val and score it on the test split."""
    archive = load_archive(cfg)
    stats, substitute = load_calibration(cfg)
    splits = load_splits(cfg)
    full = Dataset.concatenate([splits.train, splits.val], name="train+val")
    out = cfg.out_dir / "retrain"
    out.mkdir(parents=True, exist_ok=True)
    _save_config(cfg)
    state = {"cfg": cfg, "full": full, "test": splits.test, "stats": stats,
             "substitute": substitute}
    jobs = [(ind.id, ind.genome.tolist(), str(out / f"model_{ind.id}.npz")) for ind in archive]
    with _stage("retrain"), threadpool_limits(1), _Pool(cfg.threads, state) as pool:
        rows = pool.map(_retrain_job, jobs)
    _write_atomic(out / "results.csv", report_csv(rows))
    _write_atomic(out / "results.md", report_markdown(rows, RETRAIN_HEADER))
    _write_atomic(out / "results.json", _dump(rows))
    write_manifest(cfg.out_dir)
    return rows


# ---------------------------------------------------------------------------
# attack-eval
# ---------------------------------------------------------------------------

def cmd_attack_eval(model_path, dataset: Dataset, attack: AttackConfig,
                    substitute: Model | None = None, export: str | None = None) -> dict:
    """Clean and adversarial error of a saved model under one attack."""
    model, meta = load_model(model_path)
    x = dataset.images.astype(model.dtype, copy=False)
    y = dataset.labels
    with threadpool_limits(1):
        rng = stream(attack.seed, "attack-eval", int(attack.kind))
        x_adv = run_attack(model, x, y, attack, rng=rng, substitute=substitute,
                           cache=BlackBoxCache())
        metrics = {
            "model": str(model_path),
            "attack": attack.to_dict(),
            "samples": int(len(y)),
            "clean_error": error_rate(model, x, y),
            "adversarial_error": error_rate(model, x_adv, y),
            "max_linf": float(np.abs(x_adv.astype(np.float64) - x).max()),
        }
    if export:
        D.save(D.from_float_images(x_adv, y, dataset.class_count, "adversarial"), export)
        metrics["export"] = str(export)
    return metrics


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _read_snapshots(run_dir: Path) -> list[dict]:
    path = run_dir / "search" / "snapshots.jsonl"
    if not path.exists():
        raise ConfigError(f"no search snapshots in {run_dir}; run `moras search` first")
    return [json.loads(line) for line in path.read_text().splitlines() if line]


def _csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def cmd_report(run_dir) -> str:
    """Markdown summary plus plot data (HV per generation, first/last fronts)."""
    run_dir = Path(run_dir)
    snaps = _read_snapshots(run_dir)
    out = run_dir / "report"
    hv_rows = [{"generation": s["generation"], "evaluated": len(s["evaluated"]),
                "hv_population": repr(s["hv_population"]), "hv_archive": repr(s["hv_archive"]),
                "hv_archive_frozen": repr(s["hv_archive_frozen"]),
                "archive_size": len(s["archive"])} for s in snaps]
    _write_atomic(out / "hv.csv", _csv(hv_rows, list(hv_rows[0])))

    front_rows = []
    for label, snap in (("first", snaps[0]), ("last", snaps[-1])):
        pts = [tuple(p) for p in snap["population_front"]]
        for f1, f2 in sorted(set(pts)):
            front_rows.append({"which": label, "generation": snap["generation"],
                               "f1": repr(f1), "f2": repr(f2)})
    _write_atomic(out / "front.csv", _csv(front_rows, ["which", "generation", "f1", "f2"]))

    last = snaps[-1]
    lines = ["# Run report", "", f"Generations: {len(snaps)}; evaluated architectures: "
             f"{sum(len(s['evaluated']) for s in snaps)}.", "",
             "## Archive (global non-dominated set)", "",
             "| id | f1 (clean error %) | f2 (robustness z) | attack drawn |", "|---|---|---|---|"]
    for ind in sorted(last["archive"], key=lambda d: tuple(d["objectives"])):
        f1, f2 = ind["objectives"]
        lines.append(f"| {ind['id']} | {f1:.2f} | {f2:.3f} | {ind['info'].get('attack')} |")
    lines += ["", "## Hypervolume", "",
              "| generation | population | archive | archive (frozen ref) |", "|---|---|---|---|"]
    for s in snaps:
        lines.append(f"| {s['generation']} | {s['hv_population']:.4f} | {s['hv_archive']:.4f} | "
                     f"{s['hv_archive_frozen']:.4f} |")
    results = run_dir / "retrain" / "results.md"
    if results.exists():
        lines += ["", "## Retrained models", "", results.read_text().rstrip()]
    text = "\n".join(lines) + "\n"
    _write_atomic(out / "report.md", text)
    write_manifest(run_dir)
    return text


def archive_is_nondominated(archive: list[Individual]) -> bool:
    pts = [ind.objectives for ind in archive]
    return len(fast_nondominated_sort(pts)) <= 1


def run_pipeline(cfg: RunConfig) -> dict:
    """All four stages in order (reusing an existing calibration if configured)."""
    timings = {}
    t0 = time.perf_counter()
    if cfg.calibration_dir is None:
        cmd_calibrate(cfg)
    timings["calibrate"] = time.perf_counter() - t0
    t = time.perf_counter()
    archive = cmd_search(cfg)
    timings["search"] = time.perf_counter() - t
    t = time.perf_counter()
    cmd_retrain(cfg)
    timings["retrain"] = time.perf_counter() - t
    t = time.perf_counter()
    cmd_report(cfg.out_dir)
    timings["report"] = time.perf_counter() - t
    timings["total"] = time.perf_counter() - t0
    return {"archive": archive, "timings": timings}
