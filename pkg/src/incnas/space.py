"""Search spaces: declarations, architectures, sampling and enumeration.

Two topology regimes are supported. ``free`` spaces (NAS-Bench-101 style) allow
any valid labeled DAG within vertex and edge caps. ``template`` spaces
(NAS-Bench-301 style) fix a skeleton of intermediate nodes, each fed by a fixed
number of operation-carrying edges; such cells are converted to the
operations-on-nodes form before hashing or encoding.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from math import comb
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .graph import (
    DIGEST_SIZE,
    INPUT,
    LABEL_CODES,
    OUTPUT,
    SECOND_INPUT,
    CellGraph,
    InvalidGraphError,
    digest_unchecked,
    refine_digest,
    validate,
)

NB101_OPS = ("c1", "c3", "mp")
NB301_OPS = (
    "avg_pool_3x3",
    "dil_conv_3x3",
    "dil_conv_5x5",
    "max_pool_3x3",
    "sep_conv_3x3",
    "sep_conv_5x5",
    "skip_connect",
)
REDUCTION = "sum"

FREE = "free"
TEMPLATE = "template"


class SamplingError(RuntimeError):
    """Rejection sampling ran out of attempts."""


class EnumerationTooLarge(ValueError):
    """The requested space exceeds the enumeration guard."""


@dataclass(frozen=True)
class SpaceSpec:
    """Declarative rules of a search space.

    For ``template`` spaces ``max_vertices`` counts the nodes of the
    operations-on-edges cell (inputs, intermediates and output); the converted
    graphs are described by :attr:`graph_spec`.
    """

    name: str
    max_vertices: int
    max_edges: int
    op_labels: tuple[str, ...]
    cells_per_architecture: int = 1
    regime: str = FREE
    num_intermediate: int | None = None
    in_edges: int | None = None
    input_labels: tuple[str, ...] = (INPUT,)
    output_label: str = OUTPUT
    label_codes: Mapping[str, int] = field(default_factory=lambda: dict(LABEL_CODES), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "op_labels", tuple(self.op_labels))
        object.__setattr__(self, "input_labels", tuple(self.input_labels))
        if self.max_vertices < 2:
            raise ValueError("max_vertices must be at least 2")
        if not self.op_labels:
            raise ValueError("op_labels must be non-empty")
        if self.cells_per_architecture not in (1, 2):
            raise ValueError("cells_per_architecture must be 1 or 2")
        if self.regime not in (FREE, TEMPLATE):
            raise ValueError(f"unknown topology regime {self.regime!r}")
        if self.regime == TEMPLATE:
            if not self.num_intermediate or not self.in_edges:
                raise ValueError("template regime needs num_intermediate and in_edges")
            if self.in_edges != 2:
                raise ValueError("template regime supports exactly 2 in-edges per intermediate")
        missing = [lab for lab in self.labels if lab not in self.label_codes]
        if missing:
            raise ValueError(f"labels without byte codes: {missing}")

    @property
    def labels(self) -> tuple[str, ...]:
        """Full label alphabet of the node graphs, in one-hot order."""
        g = self.graph_spec
        return g.input_labels + g.op_labels + (g.output_label,)

    @cached_property
    def graph_spec(self) -> "SpaceSpec":
        """Spec that the operations-on-nodes cells of this space validate against."""
        if self.regime == FREE:
            return self
        k = self.num_intermediate
        n_ops = k * self.in_edges
        return SpaceSpec(
            name=f"{self.name}-nodes",
            max_vertices=2 + n_ops + k + 1,
            max_edges=2 * n_ops + k,
            op_labels=self.op_labels + (REDUCTION,),
            input_labels=(INPUT, SECOND_INPUT),
            output_label=self.output_label,
            label_codes=self.label_codes,
        )

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "max_vertices": self.max_vertices,
            "max_edges": self.max_edges,
            "op_labels": list(self.op_labels),
            "cells_per_architecture": self.cells_per_architecture,
            "regime": self.regime,
        }
        if self.regime == TEMPLATE:
            d["num_intermediate"] = self.num_intermediate
            d["in_edges"] = self.in_edges
        return d


NB101 = SpaceSpec("nb101", max_vertices=7, max_edges=9, op_labels=NB101_OPS)
NB301 = SpaceSpec(
    "nb301",
    max_vertices=7,
    max_edges=12,
    op_labels=NB301_OPS,
    cells_per_architecture=2,
    regime=TEMPLATE,
    num_intermediate=4,
    in_edges=2,
)
PRESETS = {"nb101": NB101, "nb301": NB301}


def load_spec(source: str | Path) -> SpaceSpec:
    """Return a preset by name, or load a spec from a JSON file of key/value pairs."""
    if str(source) in PRESETS:
        return PRESETS[str(source)]
    data = json.loads(Path(source).read_text())
    codes = dict(LABEL_CODES)
    codes.update(data.pop("label_codes", {}))
    known = {"name", "max_vertices", "max_edges", "op_labels", "cells_per_architecture",
             "regime", "num_intermediate", "in_edges"}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown space keys: {sorted(unknown)}")
    data.setdefault("name", Path(source).stem)
    data["op_labels"] = tuple(data["op_labels"])
    return SpaceSpec(label_codes=codes, **data)


@dataclass(frozen=True)
class EdgeCell:
    """Operations-on-edges cell.

    Nodes 0 and 1 are inputs, intermediate ``k`` is node ``2 + k`` and the
    output is node ``2 + num_intermediate``. ``op_edges`` lists
    ``(src_node, dst_intermediate, op)`` grouped by destination.
    """

    num_intermediate: int
    op_edges: tuple[tuple[int, int, str], ...]

    def __init__(self, num_intermediate: int, op_edges):
        object.__setattr__(self, "num_intermediate", int(num_intermediate))
        object.__setattr__(self, "op_edges", tuple((int(s), int(d), str(op)) for s, d, op in op_edges))

    def check(self, op_labels: Sequence[str] | None = NB301_OPS) -> None:
        """Raise :class:`InvalidGraphError` if the cell breaks the template rules.

        ``op_labels=None`` skips the alphabet check.
        """
        incoming: dict[int, list[int]] = {k: [] for k in range(self.num_intermediate)}
        for src, dst, op in self.op_edges:
            if dst not in incoming:
                raise InvalidGraphError(f"edge targets unknown intermediate {dst}")
            if not 0 <= src < 2 + dst:
                raise InvalidGraphError(f"edge source {src} not below intermediate node {2 + dst}")
            if op_labels is not None and op not in op_labels:
                raise InvalidGraphError(f"unknown operation {op!r}")
            incoming[dst].append(src)
        for k, sources in incoming.items():
            if len(sources) != 2:
                raise InvalidGraphError(f"intermediate {k} has {len(sources)} in-edges, expected 2")
            if sources[0] == sources[1]:
                raise InvalidGraphError(f"both in-edges of intermediate {k} come from node {sources[0]}")

    @cached_property
    def graph(self) -> CellGraph:
        return convert_edges_to_nodes(self)

    def to_text(self) -> str:
        parts = [f"{s}>{d}:{op}" for s, d, op in self.op_edges]
        return "edgecell=" + ",".join(parts)

    @classmethod
    def from_text(cls, text: str) -> "EdgeCell":
        key, _, body = text.strip().partition("=")
        if key != "edgecell":
            raise ValueError(f"not an edge cell: {text!r}")
        edges = []
        for token in body.split(","):
            pair, _, op = token.partition(":")
            s, _, d = pair.partition(">")
            edges.append((int(s), int(d), op))
        num = max(d for _, d, _ in edges) + 1
        return cls(num, edges)


def convert_edges_to_nodes(cell: EdgeCell) -> CellGraph:
    """Operations-on-nodes form of an :class:`EdgeCell`.

    Every op-edge becomes a labeled vertex fed by the edge's source and feeding
    the edge's destination, each intermediate becomes a ``sum`` vertex and every
    ``sum`` vertex feeds the output. Vertices are laid out as the two inputs,
    then per intermediate its op vertices followed by its ``sum`` vertex, then
    the output, which keeps all edges pointing forward.
    """
    cell.check(op_labels=None)
    labels = [INPUT, SECOND_INPUT]
    node_vertex = {0: 0, 1: 1}
    edges: list[tuple[int, int]] = []
    reductions = []
    for k in range(cell.num_intermediate):
        op_vertices = []
        for src, dst, op in cell.op_edges:
            if dst != k:
                continue
            v = len(labels)
            labels.append(op)
            edges.append((node_vertex[src], v))
            op_vertices.append(v)
        r = len(labels)
        labels.append(REDUCTION)
        edges.extend((v, r) for v in op_vertices)
        node_vertex[2 + k] = r
        reductions.append(r)
    out = len(labels)
    labels.append(OUTPUT)
    edges.extend((r, out) for r in reductions)
    return CellGraph(len(labels), edges, labels)


@dataclass(frozen=True)
class Architecture:
    """One MDP state: a tuple of cells (``CellGraph`` or ``EdgeCell``)."""

    cells: tuple

    def __init__(self, cells):
        object.__setattr__(self, "cells", tuple(cells))

    @cached_property
    def graphs(self) -> tuple[CellGraph, ...]:
        return tuple(c.graph if isinstance(c, EdgeCell) else c for c in self.cells)

    @cached_property
    def digest(self) -> bytes:
        digests = [digest_unchecked(g) for g in self.graphs]
        if len(digests) == 1:
            return digests[0]
        return hashlib.blake2s(b"".join(digests), digest_size=DIGEST_SIZE).digest()

    @property
    def hex(self) -> str:
        return self.digest.hex()

    def to_text(self) -> str:
        return " | ".join(c.to_text() for c in self.cells)

    @classmethod
    def from_text(cls, text: str) -> "Architecture":
        cells = []
        for part in text.split("|"):
            part = part.strip()
            if part.startswith("edgecell="):
                cells.append(EdgeCell.from_text(part))
            else:
                cells.append(CellGraph.from_text(part))
        return cls(cells)

    def __str__(self) -> str:
        return self.to_text()


def validate_architecture(arch: Architecture, spec: SpaceSpec):
    """First violated rule across all cells, as a :class:`ValidationResult`."""
    from .graph import ValidationResult

    if len(arch.cells) != spec.cells_per_architecture:
        return ValidationResult(False, "cell_count",
                                f"{len(arch.cells)} cells, expected {spec.cells_per_architecture}")
    for cell in arch.cells:
        if spec.regime == TEMPLATE:
            if not isinstance(cell, EdgeCell):
                return ValidationResult(False, "cell_type", "template spaces hold edge cells")
            if cell.num_intermediate != spec.num_intermediate:
                return ValidationResult(False, "template", "wrong number of intermediate nodes")
            try:
                cell.check(spec.op_labels)
            except InvalidGraphError as exc:
                return ValidationResult(False, "template", str(exc))
        elif isinstance(cell, EdgeCell):
            return ValidationResult(False, "cell_type", "free spaces hold node graphs")
    for g in arch.graphs:
        res = validate(g, spec.graph_spec)
        if not res:
            return res
    return ValidationResult(True)


def _pair_index(n: int) -> list[tuple[int, int]]:
    # Row-major over the strict lower triangle of the transposed matrix, i.e.
    # (0,1), (0,2), (1,2), (0,3), ...
    return [(s, d) for d in range(1, n) for s in range(d)]


def _sample_free_cell(spec: SpaceSpec, rng: np.random.Generator, max_attempts: int, block: int = 512) -> CellGraph:
    n = int(rng.integers(2, spec.max_vertices + 1))
    pairs = _pair_index(n)
    out_inc = np.zeros((len(pairs), n), dtype=np.float32)
    in_inc = np.zeros((len(pairs), n), dtype=np.float32)
    for i, (s, d) in enumerate(pairs):
        out_inc[i, s] = 1
        in_inc[i, d] = 1
    attempts = 0
    while attempts < max_attempts:
        size = min(block, max_attempts - attempts)
        bits = rng.random((size, len(pairs))) < 0.5
        attempts += size
        fb = bits.astype(np.float32)
        ok = ((fb @ out_inc)[:, : n - 1] > 0).all(axis=1) & ((fb @ in_inc)[:, 1:] > 0).all(axis=1)
        ok &= fb.sum(axis=1) <= spec.max_edges
        hits = np.flatnonzero(ok)
        if hits.size:
            row = bits[hits[0]]
            edges = [pairs[i] for i in np.flatnonzero(row)]
            ops = rng.integers(len(spec.op_labels), size=n - 2)
            labels = [INPUT] + [spec.op_labels[i] for i in ops] + [OUTPUT]
            return CellGraph(n, edges, labels)
    raise SamplingError(f"no valid {n}-vertex cell within {max_attempts} attempts")


def sample_edge_cell(spec: SpaceSpec, rng: np.random.Generator) -> EdgeCell:
    edges = []
    for k in range(spec.num_intermediate):
        sources = rng.choice(2 + k, size=2, replace=False)
        ops = rng.integers(len(spec.op_labels), size=2)
        for s, o in zip(sources, ops):
            edges.append((int(s), k, spec.op_labels[o]))
    return EdgeCell(spec.num_intermediate, edges)


def sample_uniform(spec: SpaceSpec, rng: np.random.Generator, max_attempts: int = 100_000) -> Architecture:
    """Draw one architecture.

    Free spaces first draw a vertex count uniformly from ``[2, max_vertices]``,
    then rejection-sample adjacency patterns (and labelings) of exactly that
    size. Template spaces draw each op-edge source and label uniformly under the
    distinct-source rule. Cells are drawn independently.
    """
    cells = []
    for _ in range(spec.cells_per_architecture):
        if spec.regime == FREE:
            cells.append(_sample_free_cell(spec, rng, max_attempts))
        else:
            cells.append(sample_edge_cell(spec, rng))
    return Architecture(cells)


def estimate_candidates(spec: SpaceSpec) -> int:
    """Raw (adjacency pattern, labeling) pairs that :func:`enumerate_space` would visit."""
    total = 0
    for n in range(2, spec.max_vertices + 1):
        p = n * (n - 1) // 2
        patterns = sum(comb(p, k) for k in range(min(p, spec.max_edges) + 1))
        total += patterns * len(spec.op_labels) ** (n - 2)
    return total


def _full_dag_patterns(n: int, max_edges: int) -> Iterator[tuple[tuple[int, int], ...]]:
    pairs = _pair_index(n)
    for k in range(n - 1, min(len(pairs), max_edges) + 1):
        for chosen in itertools.combinations(pairs, k):
            has_out = [False] * n
            has_in = [False] * n
            for s, d in chosen:
                has_out[s] = True
                has_in[d] = True
            if all(has_out[: n - 1]) and all(has_in[1:]):
                yield chosen


def enumerate_digests(spec: SpaceSpec, max_candidates: int = 10**9) -> Iterator[tuple[bytes, tuple, tuple]]:
    """Yield ``(digest, edges, labels)`` for every isomorphism class, once each."""
    if spec.regime != FREE or spec.cells_per_architecture != 1:
        raise ValueError("only single-cell free-form spaces can be enumerated")
    estimate = estimate_candidates(spec)
    if estimate > max_candidates:
        raise EnumerationTooLarge(f"{estimate} raw candidates exceeds bound {max_candidates}")
    codes = spec.label_codes
    op_codes = [codes[op] for op in spec.op_labels]
    in_code, out_code = codes[INPUT], codes[OUTPUT]
    seen: set[bytes] = set()
    for n in range(2, spec.max_vertices + 1):
        for edges in _full_dag_patterns(n, spec.max_edges):
            preds = [[] for _ in range(n)]
            succs = [[] for _ in range(n)]
            for s, d in edges:
                preds[d].append(s)
                succs[s].append(d)
            for labeling in itertools.product(range(len(op_codes)), repeat=n - 2):
                codes_v = [in_code] + [op_codes[i] for i in labeling] + [out_code]
                digest = refine_digest(preds, succs, codes_v)
                if digest in seen:
                    continue
                seen.add(digest)
                labels = (INPUT,) + tuple(spec.op_labels[i] for i in labeling) + (OUTPUT,)
                yield digest, edges, labels


def enumerate_space(spec: SpaceSpec, max_candidates: int = 10**9) -> Iterator[Architecture]:
    """Every valid architecture of a free-form space, exactly once up to isomorphism.

    Vertex counts run from 2 to ``max_vertices``; for each, all forward
    adjacency patterns within the edge cap that satisfy the degree rules are
    combined with all labelings and deduplicated by canonical digest.
    """
    for _, edges, labels in enumerate_digests(spec, max_candidates):
        yield Architecture((CellGraph(len(labels), edges, labels),))


def with_caps(spec: SpaceSpec, **changes) -> SpaceSpec:
    """Copy of ``spec`` with some fields replaced (e.g. a smaller vertex cap)."""
    return replace(spec, **changes)
