"""NSGA-II for two minimized objectives over real-coded genomes in [0, 1).

Includes fast non-dominated sorting, crowding distance, SBX and polynomial
mutation, elitist environmental selection, an unbounded archive of
globally non-dominated solutions, and the exact 2-D hypervolume.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .rng import stream

GENE_MAX = float(np.nextafter(1.0, 0.0))


@dataclass(frozen=True)
class EvoConfig:
    pop_size: int = 8
    generations: int = 10
    p_crossover: float = 0.9
    p_mutation: float = 0.02
    eta_c: float = 15.0
    eta_m: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.pop_size < 2 or self.pop_size % 2:
            raise ConfigError("pop_size must be an even number >= 2")
        if self.generations < 1:
            raise ConfigError("generations must be >= 1")
        for name in ("p_crossover", "p_mutation"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.eta_c < 0 or self.eta_m < 0:
            raise ConfigError("distribution indices must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvoConfig":
        return cls(**d)


@dataclass
class Individual:
    id: int
    genome: np.ndarray
    objectives: tuple[float, float] | None = None
    rank: int | None = None
    crowding: float | None = None
    info: dict = field(default_factory=dict)

    def set_objectives(self, f1: float, f2: float) -> None:
        if self.objectives is not None:
            raise ValueError(f"individual {self.id} already has objectives")
        self.objectives = (float(f1), float(f2))

    def to_dict(self) -> dict:
        return {"id": self.id, "genome": [float(g) for g in self.genome],
                "objectives": None if self.objectives is None else list(self.objectives),
                "info": self.info}

    @classmethod
    def from_dict(cls, d: dict) -> "Individual":
        obj = d.get("objectives")
        return cls(int(d["id"]), np.asarray(d["genome"], dtype=np.float64),
                   None if obj is None else (float(obj[0]), float(obj[1])), info=d.get("info", {}))


# ---------------------------------------------------------------------------
# dominance, sorting, crowding
# ---------------------------------------------------------------------------

def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    """``a`` is no worse than ``b`` everywhere and strictly better somewhere."""
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        pts = pts.reshape(len(pts), -1)
    if np.isnan(pts).any():
        raise ValueError("objective values must not be NaN")
    return pts


def fast_nondominated_sort(points) -> list[list[int]]:
    """Partition point indices into fronts F0, F1, ... (each sorted ascending)."""
    pts = _as_points(points)
    n = len(pts)
    if n == 0:
        return []
    le = np.all(pts[:, None, :] <= pts[None, :, :], axis=2)
    lt = np.any(pts[:, None, :] < pts[None, :, :], axis=2)
    dom = le & lt  # dom[i, j]: i dominates j
    counts = dom.sum(axis=0)
    fronts = []
    current = np.flatnonzero(counts == 0)
    while current.size:
        fronts.append(current.tolist())
        counts = counts - dom[current].sum(axis=0)
        counts[current] = -1
        current = np.flatnonzero(counts == 0)
    return fronts


def crowding_distance(points) -> np.ndarray:
    """Crowding distance of every member of one front."""
    pts = _as_points(points)
    n, m = pts.shape
    dist = np.zeros(n)
    if n <= 2:
        dist[:] = math.inf
        return dist
    for j in range(m):
        order = np.argsort(pts[:, j], kind="stable")
        lo, hi = pts[order[0], j], pts[order[-1], j]
        span = hi - lo
        if span == 0:
            continue
        dist[order[0]] = dist[order[-1]] = math.inf
        gaps = (pts[order[2:], j] - pts[order[:-2], j]) / span
        dist[order[1:-1]] += gaps
    return dist


def assign_rank_and_crowding(individuals: Sequence[Individual]) -> list[list[int]]:
    fronts = fast_nondominated_sort([ind.objectives for ind in individuals])
    for rank, front in enumerate(fronts):
        cd = crowding_distance([individuals[i].objectives for i in front])
        for i, d in zip(front, cd):
            individuals[i].rank = rank
            individuals[i].crowding = float(d)
    return fronts


def environmental_selection(individuals: Sequence[Individual], n: int) -> list[Individual]:
    """Keep ``n`` individuals by front, then descending crowding, then lower id."""
    fronts = assign_rank_and_crowding(individuals)
    chosen: list[Individual] = []
    for front in fronts:
        members = [individuals[i] for i in front]
        if len(chosen) + len(members) <= n:
            chosen.extend(members)
        else:
            members.sort(key=lambda ind: (-ind.crowding, ind.id))
            chosen.extend(members[:n - len(chosen)])
        if len(chosen) == n:
            break
    return chosen


def binary_tournament(pop: Sequence[Individual], rng: np.random.Generator) -> Individual:
    i, j = rng.choice(len(pop), size=2, replace=False)
    a, b = pop[i], pop[j]
    key = lambda ind: (ind.rank, -ind.crowding, ind.id)
    return a if key(a) <= key(b) else b


# ---------------------------------------------------------------------------
# variation
# ---------------------------------------------------------------------------

def sbx_spread(u: np.ndarray, eta: float) -> np.ndarray:
    """Spread factor beta for uniforms ``u`` (inverse CDF of the SBX density)."""
    u = np.asarray(u, dtype=np.float64)
    e = 1.0 / (eta + 1.0)
    return np.where(u <= 0.5, (2.0 * u) ** e, (1.0 / (2.0 * (1.0 - u))) ** e)


def sbx_children(p1: np.ndarray, p2: np.ndarray, beta: np.ndarray):
    """Unclamped SBX children; their mean equals the parents' mean."""
    mean = 0.5 * (p1 + p2)
    half = 0.5 * beta * (p2 - p1)
    return mean - half, mean + half


def clamp_genes(g: np.ndarray) -> np.ndarray:
    return np.clip(g, 0.0, GENE_MAX)


def sbx_crossover(p1, p2, eta_c: float, p_crossover: float, rng: np.random.Generator):
    """Simulated binary crossover of two genomes, children clamped to [0, 1)."""
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    if rng.random() >= p_crossover:
        return p1.copy(), p2.copy()
    beta = sbx_spread(rng.random(p1.shape), eta_c)
    c1, c2 = sbx_children(p1, p2, beta)
    return clamp_genes(c1), clamp_genes(c2)


def polynomial_mutation(g, eta_m: float, p_mutation: float, rng: np.random.Generator):
    """Mutate each gene with probability ``p_mutation``, clamped to [0, 1)."""
    g = np.asarray(g, dtype=np.float64)
    mask = rng.random(g.shape) < p_mutation
    u = rng.random(g.shape)
    e = 1.0 / (eta_m + 1.0)
    delta = np.where(u < 0.5, (2.0 * u) ** e - 1.0, 1.0 - (2.0 * (1.0 - u)) ** e)
    return clamp_genes(np.where(mask, g + delta, g))


def make_offspring(pop: Sequence[Individual], cfg: EvoConfig, rng: np.random.Generator,
                   first_id: int) -> list[Individual]:
    children: list[Individual] = []
    while len(children) < len(pop):
        a = binary_tournament(pop, rng)
        b = binary_tournament(pop, rng)
        c1, c2 = sbx_crossover(a.genome, b.genome, cfg.eta_c, cfg.p_crossover, rng)
        for c in (c1, c2):
            g = polynomial_mutation(c, cfg.eta_m, cfg.p_mutation, rng)
            children.append(Individual(first_id + len(children), g,
                                       info={"parents": [a.id, b.id]}))
    return children[:len(pop)]


# ---------------------------------------------------------------------------
# archive and hypervolume
# ---------------------------------------------------------------------------

def update_archive(archive: Iterable[Individual], candidates: Iterable[Individual]) -> list[Individual]:
    """Non-dominated members of ``archive`` plus ``candidates``.

    Among individuals with identical objectives only the lowest id is kept.
    """
    best: dict[tuple[float, float], Individual] = {}
    for ind in list(archive) + list(candidates):
        if ind.objectives is None:
            raise ValueError(f"individual {ind.id} has not been evaluated")
        key = tuple(ind.objectives)
        if key not in best or ind.id < best[key].id:
            best[key] = ind
    pool = sorted(best.values(), key=lambda ind: ind.id)
    if not pool:
        return []
    front = fast_nondominated_sort([ind.objectives for ind in pool])[0]
    return [pool[i] for i in front]


def hypervolume_2d(points, ref: Sequence[float]) -> float:
    """Area dominated by ``points`` and bounded by ``ref`` (minimization)."""
    pts = _as_points(points) if len(points) else np.empty((0, 2))
    r1, r2 = float(ref[0]), float(ref[1])
    pts = pts[(pts[:, 0] < r1) & (pts[:, 1] < r2)]
    if len(pts) == 0:
        return 0.0
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    area = 0.0
    level = r2
    for f1, f2 in pts:
        if f2 < level:
            area += (r1 - f1) * (level - f2)
            level = f2
    return float(area)


def reference_point(points) -> tuple[float, float]:
    """``max + 0.1 * |max| + 1e-9`` per objective; equals 1.1 * max for positive maxima."""
    pts = _as_points(points)
    if len(pts) == 0:
        raise ValueError("need at least one point")
    mx = pts.max(axis=0)
    r = mx + 0.1 * np.abs(mx) + 1e-9
    return float(r[0]), float(r[1])


# ---------------------------------------------------------------------------
# the evolutionary loop
# ---------------------------------------------------------------------------

Evaluator = Callable[[list[Individual]], None]


class NSGA2:
    """Generational NSGA-II with an external archive.

    Generation 0 evaluates the random initial population; each later
    generation produces ``pop_size`` offspring, so a run of ``generations``
    generations evaluates ``pop_size * generations`` individuals. All random
    draws are keyed by ``(seed, generation)`` or ``(seed, individual id)``.

    ``evaluate`` receives unevaluated individuals and must call
    :meth:`Individual.set_objectives` on each.
    """

    def __init__(self, cfg: EvoConfig, n_var: int, evaluate: Evaluator):
        self.cfg = cfg
        self.n_var = n_var
        self.evaluate = evaluate
        self.generation = -1
        self.population: list[Individual] = []
        self.archive: list[Individual] = []
        self.next_id = 0
        self.evaluated: list[tuple[float, float]] = []
        self.frozen_ref: tuple[float, float] | None = None
        self.history: list[dict] = []

    @property
    def done(self) -> bool:
        return self.generation >= self.cfg.generations - 1

    def _evaluate(self, inds: list[Individual]) -> None:
        self.evaluate(inds)
        for ind in inds:
            if ind.objectives is None:
                raise RuntimeError(f"evaluator left individual {ind.id} unevaluated")
        self.evaluated.extend(ind.objectives for ind in inds)

    def step(self) -> dict:
        """Advance by one generation and return its snapshot record."""
        if self.done:
            raise RuntimeError("run already complete")
        gen = self.generation + 1
        if gen == 0:
            new = [Individual(i, stream(self.cfg.seed, "genome", i).random(self.n_var))
                   for i in range(self.cfg.pop_size)]
            self._evaluate(new)
            merged = new
        else:
            rng = stream(self.cfg.seed, "variation", gen)
            new = make_offspring(self.population, self.cfg, rng, self.next_id)
            self._evaluate(new)
            merged = self.population + new
        self.next_id += len(new)
        self.population = environmental_selection(merged, self.cfg.pop_size)
        first = [merged[i] for i in fast_nondominated_sort([m.objectives for m in merged])[0]]
        self.archive = update_archive(self.archive, first)
        self.generation = gen
        if self.frozen_ref is None:
            self.frozen_ref = reference_point(self.evaluated)
        record = self._record(new)
        self.history.append(record)
        return record

    def _record(self, new: list[Individual]) -> dict:
        running = reference_point(self.evaluated)
        pop_pts = [ind.objectives for ind in self.population]
        arc_pts = [ind.objectives for ind in self.archive]
        pop_front = fast_nondominated_sort(pop_pts)[0]
        return {
            "generation": self.generation,
            "evaluated": [ind.to_dict() for ind in new],
            "population": [ind.to_dict() | {"rank": ind.rank, "crowding": ind.crowding}
                           for ind in self.population],
            "population_front": [list(pop_pts[i]) for i in pop_front],
            "archive": [ind.to_dict() for ind in self.archive],
            "ref_running": list(running),
            "ref_frozen": list(self.frozen_ref),
            "hv_population": hypervolume_2d(pop_pts, running),
            "hv_archive": hypervolume_2d(arc_pts, running),
            "hv_archive_frozen": hypervolume_2d(arc_pts, self.frozen_ref),
        }

    def run(self, callback: Callable[[dict], None] | None = None,
            stop_after: int | None = None) -> list[Individual]:
        """Run to completion (or until generation ``stop_after``)."""
        while not self.done:
            if stop_after is not None and self.generation >= stop_after:
                break
            record = self.step()
            if callback is not None:
                callback(record)
        return self.archive

    # checkpointing ---------------------------------------------------------

    def state(self) -> dict:
        return {
            "generation": self.generation,
            "next_id": self.next_id,
            # selection state is part of the checkpoint: crowding was computed
            # on the merged fronts and cannot be rebuilt from survivors alone
            "population": [ind.to_dict() | {"rank": ind.rank, "crowding": ind.crowding}
                           for ind in self.population],
            "archive": [ind.to_dict() for ind in self.archive],
            "evaluated": [list(p) for p in self.evaluated],
            "frozen_ref": None if self.frozen_ref is None else list(self.frozen_ref),
        }

    def restore(self, state: dict) -> None:
        self.generation = int(state["generation"])
        self.next_id = int(state["next_id"])
        self.population = []
        for d in state["population"]:
            ind = Individual.from_dict(d)
            ind.rank, ind.crowding = d.get("rank"), d.get("crowding")
            self.population.append(ind)
        self.archive = [Individual.from_dict(d) for d in state["archive"]]
        self.evaluated = [tuple(p) for p in state["evaluated"]]
        ref = state.get("frozen_ref")
        self.frozen_ref = None if ref is None else (float(ref[0]), float(ref[1]))
        if self.population and any(ind.rank is None for ind in self.population):
            assign_rank_and_crowding(self.population)
