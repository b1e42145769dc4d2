"""Real-coded genome for a normal/reduction cell pair.

A genome has 32 genes in [0, 1). Each cell takes 16 of them: four
intermediate nodes (ids 2..5), each with two ``(op, input)`` pairs. Node 0 and
node 1 are the outputs of the two preceding cells. Genes decode to integers by
binning, so real-coded variation operators apply directly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import GenomeError

OPS = (
    "max_3x3",
    "avg_3x3",
    "identity",
    "sep_3x3",
    "sep_5x5",
    "dil_3x3",
    "sep_7x7",
    "dil_5x5",
)
N_OPS = len(OPS)
N_INTERMEDIATE = 4
FIRST_NODE = 2
GENES_PER_CELL = N_INTERMEDIATE * 2 * 2
GENOME_LENGTH = 2 * GENES_PER_CELL

#: largest float strictly below 1.0; genes are clamped to [0, GENE_MAX]
GENE_MAX = float(np.nextafter(1.0, 0.0))


@dataclass(frozen=True)
class CellSpec:
    """Discrete cell: ``nodes[k - 2] == ((op_a, in_a), (op_b, in_b))`` for node k."""

    nodes: tuple[tuple[tuple[int, int], tuple[int, int]], ...]

    def __post_init__(self):
        if len(self.nodes) != N_INTERMEDIATE:
            raise GenomeError(f"cell needs {N_INTERMEDIATE} nodes, got {len(self.nodes)}")
        for k, pair in enumerate(self.nodes, start=FIRST_NODE):
            if len(pair) != 2:
                raise GenomeError(f"node {k} needs exactly two edges")
            for op, src in pair:
                if not 0 <= op < N_OPS:
                    raise GenomeError(f"node {k}: op id {op} out of range")
                if not 0 <= src < k:
                    raise GenomeError(f"node {k}: input {src} does not precede it")

    @classmethod
    def from_pairs(cls, pairs: Sequence) -> "CellSpec":
        return cls(tuple((tuple(a), tuple(b)) for a, b in pairs))

    def edges(self):
        """Yield ``(node, op_id, input_id)`` for every edge in node order."""
        for k, pair in enumerate(self.nodes, start=FIRST_NODE):
            for op, src in pair:
                yield k, op, src

    def to_dot(self, name: str = "cell") -> str:
        """Render the cell as a Graphviz DOT digraph."""
        lines = [f"digraph {name} {{", "  rankdir=LR;",
                 '  0 [label="c_{k-2}", shape=box];', '  1 [label="c_{k-1}", shape=box];']
        for k in range(FIRST_NODE, FIRST_NODE + N_INTERMEDIATE):
            lines.append(f"  {k};")
        for k, op, src in self.edges():
            lines.append(f'  {src} -> {k} [label="{OPS[op]}"];')
        lines.append('  out [label="concat", shape=box];')
        for k in sorted(cell_output_nodes(self)):
            lines.append(f"  {k} -> out;")
        lines.append("}")
        return "\n".join(lines)


def cell_output_nodes(cell: CellSpec) -> set[int]:
    """Intermediate nodes that no other intermediate node consumes."""
    consumed = {src for _, _, src in cell.edges()}
    return {k for k in range(FIRST_NODE, FIRST_NODE + N_INTERMEDIATE) if k not in consumed}


def _check_genes(genes) -> np.ndarray:
    genes = np.asarray(genes, dtype=np.float64)
    if genes.shape != (GENOME_LENGTH,):
        raise GenomeError(f"genome must have {GENOME_LENGTH} genes, got shape {genes.shape}")
    if not np.all((genes >= 0.0) & (genes < 1.0)):
        raise GenomeError("genes must lie in [0, 1)")
    return genes


def discretize(genes) -> np.ndarray:
    """Map the 32 continuous genes to their integer phenotype indices."""
    genes = _check_genes(genes)
    card = np.empty(GENOME_LENGTH, dtype=np.int64)
    for cell in range(2):
        for n in range(N_INTERMEDIATE):
            base = cell * GENES_PER_CELL + 4 * n
            card[base:base + 4] = (N_OPS, FIRST_NODE + n, N_OPS, FIRST_NODE + n)
    return np.minimum(np.floor(genes * card).astype(np.int64), card - 1)


def _cell_from_ints(ints: np.ndarray) -> CellSpec:
    nodes = []
    for n in range(N_INTERMEDIATE):
        a_op, a_in, b_op, b_in = (int(v) for v in ints[4 * n:4 * n + 4])
        nodes.append(((a_op, a_in), (b_op, b_in)))
    return CellSpec(tuple(nodes))


def decode(genes) -> tuple[CellSpec, CellSpec]:
    """Decode a genome into ``(normal, reduction)`` cells."""
    ints = discretize(genes)
    return _cell_from_ints(ints[:GENES_PER_CELL]), _cell_from_ints(ints[GENES_PER_CELL:])


def encode(normal: CellSpec, reduction: CellSpec) -> np.ndarray:
    """Genome whose genes sit at the centre of each phenotype's bin."""
    genes = []
    for cell in (normal, reduction):
        for k, pair in enumerate(cell.nodes, start=FIRST_NODE):
            for op, src in pair:
                genes.extend(((op + 0.5) / N_OPS, (src + 0.5) / k))
    return np.asarray(genes, dtype=np.float64)


def random_genome(rng: np.random.Generator) -> np.ndarray:
    return rng.random(GENOME_LENGTH)


def genome_to_json(genes) -> str:
    return json.dumps([float(g) for g in _check_genes(genes)])


def genome_from_json(text: str) -> np.ndarray:
    return _check_genes(json.loads(text))


@dataclass(frozen=True)
class NetworkSpec:
    """Macro skeleton around the searched cells.

    Three phases of ``cells_per_phase`` normal cells, with a reduction cell
    closing the first and second phases.
    """

    normal: CellSpec
    reduction: CellSpec
    num_classes: int
    channels: int = 8
    cells_per_phase: int = 2
    phases: int = 3
    in_channels: int = 1

    def __post_init__(self):
        if self.phases != 3:
            raise GenomeError("the skeleton uses exactly three phases")
        if self.channels <= 0 or self.cells_per_phase <= 0:
            raise GenomeError("channels and cells_per_phase must be positive")
        if self.num_classes < 2:
            raise GenomeError("need at least two classes")

    @classmethod
    def from_genome(cls, genes, num_classes: int, **kwargs) -> "NetworkSpec":
        normal, reduction = decode(genes)
        return cls(normal, reduction, num_classes, **kwargs)

    def layout(self) -> list[str]:
        """Cell kinds in stacking order, e.g. ``['normal', 'normal', 'reduction', ...]``."""
        kinds: list[str] = []
        for phase in range(self.phases):
            kinds.extend(["normal"] * self.cells_per_phase)
            if phase < self.phases - 1:
                kinds.append("reduction")
        return kinds

    def to_dict(self) -> dict:
        return {
            "normal": [list(map(list, pair)) for pair in self.normal.nodes],
            "reduction": [list(map(list, pair)) for pair in self.reduction.nodes],
            "num_classes": self.num_classes,
            "channels": self.channels,
            "cells_per_phase": self.cells_per_phase,
            "phases": self.phases,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        normal = CellSpec.from_pairs(d.pop("normal"))
        reduction = CellSpec.from_pairs(d.pop("reduction"))
        return cls(normal, reduction, **d)


# Hand-written calibration cells covering the extremes of the op table.
def uniform_cell(op: int, chain: bool = False) -> CellSpec:
    """Cell whose every edge uses ``op``; inputs are nodes 0/1 or a chain."""
    nodes = []
    for k in range(FIRST_NODE, FIRST_NODE + N_INTERMEDIATE):
        if chain:
            nodes.append(((op, k - 1), (op, k - 2)))
        else:
            nodes.append(((op, 0), (op, 1)))
    return CellSpec(tuple(nodes))
