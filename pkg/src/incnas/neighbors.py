"""Neighborhood generation for the incremental search formulation.

A neighbor differs from the current cell by one mutation: removing a vertex
(with its in/out edges bridged), adding a vertex, relabeling a vertex, removing
an edge or adding an edge. Template cells instead mutate one op-edge, either
its operation or its source. Results are deduplicated by canonical digest.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable

import numpy as np

from .graph import CellGraph, digest_unchecked, validate
from .space import Architecture, EdgeCell, SpaceSpec

# Remove-vertex subset search stops after this many selections.
MAX_BRIDGE_SUBSETS = 2**20


def _unique(graphs: Iterable[CellGraph], exclude: bytes | None = None) -> list[CellGraph]:
    seen = {exclude} if exclude is not None else set()
    out = []
    for g in graphs:
        d = digest_unchecked(g)
        if d not in seen:
            seen.add(d)
            out.append(g)
    return out


def remove_vertex_neighbors(g: CellGraph, spec: SpaceSpec) -> list[CellGraph]:
    """Neighbors obtained by deleting one intermediate vertex.

    The in-neighbors of the removed vertex may be bridged to its out-neighbors.
    Every inclusion-minimal selection of bridge edges that leaves a valid cell
    yields one neighbor, so a bridge is only added when some vertex needs it.
    """
    n = g.num_vertices
    existing = set(g.edges)
    out = []
    for v in range(1, n - 1):
        remap = lambda u: u if u < v else u - 1  # noqa: E731
        kept = [(remap(s), remap(d)) for s, d in g.edges if s != v and d != v]
        labels = g.labels[:v] + g.labels[v + 1:]
        bridges = [(s, d) for s in g.predecessors[v] for d in g.successors[v] if (s, d) not in existing]
        bridges = [(remap(s), remap(d)) for s, d in bridges]
        minimal: list[frozenset] = []
        tried = 0
        for size in range(len(bridges) + 1):
            for chosen in itertools.combinations(range(len(bridges)), size):
                tried += 1
                if tried > MAX_BRIDGE_SUBSETS:
                    break
                chosen = frozenset(chosen)
                if any(m <= chosen for m in minimal):
                    continue
                cand = CellGraph(n - 1, kept + [bridges[i] for i in chosen], labels)
                if validate(cand, spec):
                    minimal.append(chosen)
                    out.append(cand)
            if tried > MAX_BRIDGE_SUBSETS:
                break
    return _unique(out)


def add_vertex_neighbors(g: CellGraph, spec: SpaceSpec) -> list[CellGraph]:
    """Neighbors with one extra vertex wired to one earlier and one later vertex."""
    n = g.num_vertices
    if n >= spec.max_vertices or g.num_edges > spec.max_edges - 2:
        return []
    out = []
    for p in range(1, n):
        shift = lambda u: u if u < p else u + 1  # noqa: E731
        moved = [(shift(s), shift(d)) for s, d in g.edges]
        for src in range(p):
            for dst in range(p, n):
                for op in spec.op_labels:
                    labels = g.labels[:p] + (op,) + g.labels[p:]
                    out.append(CellGraph(n + 1, moved + [(src, p), (p, dst + 1)], labels))
    return _unique(c for c in out if validate(c, spec))


def change_label_neighbors(g: CellGraph, spec: SpaceSpec) -> list[CellGraph]:
    out = []
    k = len(spec.input_labels)
    for v in range(k, g.num_vertices - 1):
        for op in spec.op_labels:
            if op != g.labels[v]:
                labels = g.labels[:v] + (op,) + g.labels[v + 1:]
                out.append(CellGraph(g.num_vertices, g.edges, labels))
    return _unique(c for c in out if validate(c, spec))


def remove_edge_neighbors(g: CellGraph, spec: SpaceSpec) -> list[CellGraph]:
    out = []
    for e in g.edges:
        cand = CellGraph(g.num_vertices, [x for x in g.edges if x != e], g.labels)
        if validate(cand, spec):
            out.append(cand)
    return _unique(out)


def add_edge_neighbors(g: CellGraph, spec: SpaceSpec) -> list[CellGraph]:
    if g.num_edges >= spec.max_edges:
        return []
    existing = set(g.edges)
    out = []
    for d in range(1, g.num_vertices):
        for s in range(d):
            if (s, d) not in existing:
                out.append(CellGraph(g.num_vertices, g.edges + ((s, d),), g.labels))
    return _unique(c for c in out if validate(c, spec))


OPERATORS = (
    remove_vertex_neighbors,
    add_vertex_neighbors,
    change_label_neighbors,
    remove_edge_neighbors,
    add_edge_neighbors,
)


def edge_cell_neighbors(cell: EdgeCell, spec: SpaceSpec) -> list[EdgeCell]:
    """Template-cell neighbors: change one op-edge's operation or rewire its source."""
    edges = list(cell.op_edges)
    out = []
    for i, (src, dst, op) in enumerate(edges):
        for new_op in spec.op_labels:
            if new_op != op:
                out.append(EdgeCell(cell.num_intermediate, edges[:i] + [(src, dst, new_op)] + edges[i + 1:]))
    for i, (src, dst, op) in enumerate(edges):
        other = next(s for j, (s, d, _) in enumerate(edges) if d == dst and j != i)
        for new_src in range(2 + dst):
            if new_src not in (src, other):
                out.append(EdgeCell(cell.num_intermediate, edges[:i] + [(new_src, dst, op)] + edges[i + 1:]))
    seen = {digest_unchecked(cell.graph)}
    unique = []
    for c in out:
        d = digest_unchecked(c.graph)
        if d not in seen:
            seen.add(d)
            unique.append(c)
    return unique


@lru_cache(maxsize=16384)
def cell_neighbors(cell, spec: SpaceSpec) -> tuple:
    """All distinct single-mutation neighbors of one cell, in a fixed order."""
    if isinstance(cell, EdgeCell):
        return tuple(edge_cell_neighbors(cell, spec))
    gs = spec.graph_spec
    found = itertools.chain.from_iterable(op(cell, gs) for op in OPERATORS)
    return tuple(_unique(found, exclude=digest_unchecked(cell)))


@dataclass(frozen=True)
class NeighborSet:
    current: Architecture
    candidates: tuple[Architecture, ...]
    cap: int

    @property
    def mask(self) -> list[bool]:
        return [True] * len(self.candidates) + [False] * (self.cap - len(self.candidates))

    def __len__(self) -> int:
        return len(self.candidates)


def neighbor_pool_size(arch: Architecture, spec: SpaceSpec) -> int:
    """Number of distinct neighbors before the cap is applied."""
    per_cell = [len(cell_neighbors(c, spec)) for c in arch.cells]
    if len(per_cell) == 1:
        return per_cell[0]
    total = 1
    for k in per_cell:
        total *= k + 1
    return total - 1


def neighbors(arch: Architecture, spec: SpaceSpec, cap: int, rng: np.random.Generator) -> NeighborSet:
    """Up to ``cap`` neighbors of ``arch`` in a random order.

    Single-cell spaces take a uniform random subset of the deduplicated union
    of all operators. Multi-cell spaces build tuples with one entry per cell,
    where each entry is the unchanged cell or one of its neighbors, and sample
    tuples uniformly without replacement, never the all-unchanged tuple.
    """
    if cap <= 0:
        return NeighborSet(arch, (), max(cap, 0))
    per_cell = [cell_neighbors(c, spec) for c in arch.cells]
    if len(per_cell) == 1:
        pool = per_cell[0]
        picks = rng.permutation(len(pool))[:cap]
        cands = tuple(Architecture((pool[i],)) for i in picks)
        return NeighborSet(arch, cands, cap)
    options = [(c,) + tuple(nb) for c, nb in zip(arch.cells, per_cell)]
    sizes = [len(o) for o in options]
    total = int(np.prod(sizes))
    count = min(cap, total - 1)
    flat = rng.choice(total - 1, size=count, replace=False) + 1
    cands = []
    for idx in flat:
        combo = np.unravel_index(int(idx), sizes)
        cands.append(Architecture(tuple(options[c][i] for c, i in enumerate(combo))))
    return NeighborSet(arch, tuple(cands), cap)


def all_neighbors(arch: Architecture, spec: SpaceSpec) -> list[Architecture]:
    """Uncapped single-cell neighbor list in generation order (for tools and tests)."""
    if len(arch.cells) != 1:
        raise ValueError("uncapped listing is only defined for single-cell architectures")
    return [Architecture((c,)) for c in cell_neighbors(arch.cells[0], spec)]


def operator_outputs(g: CellGraph, spec: SpaceSpec) -> dict[str, list[CellGraph]]:
    return {op.__name__.replace("_neighbors", ""): op(g, spec.graph_spec) for op in OPERATORS}

