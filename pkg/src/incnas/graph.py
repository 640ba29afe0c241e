"""Cell graphs: the labeled DAG data model, validity rules and canonical hashing.

A cell is a DAG whose vertices carry operation labels. Vertex 0 is the input,
the highest-indexed vertex is the output and every edge points from a lower to
a higher index. Two cells that differ only by a relabeling of their
intermediate vertices describe the same computation, so lookups and
deduplication go through :func:`canonical_hash`, an iterative neighborhood
refinement over vertex hashes.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping, Sequence

INPUT = "in"
OUTPUT = "out"
SECOND_INPUT = "in1"

DIGEST_SIZE = 32

# Frozen label -> byte table. Changing an entry changes every stored digest.
LABEL_CODES: dict[str, int] = {
    "in": 0,
    "out": 1,
    "c1": 2,
    "c3": 3,
    "mp": 4,
    "in1": 5,
    "sum": 6,
    "avg_pool_3x3": 7,
    "dil_conv_3x3": 8,
    "dil_conv_5x5": 9,
    "max_pool_3x3": 10,
    "sep_conv_3x3": 11,
    "sep_conv_5x5": 12,
    "skip_connect": 13,
}

MAX_BRUTEFORCE_VERTICES = 8


class InvalidGraphError(ValueError):
    """Raised when an operation that requires a valid cell receives an invalid one."""


@dataclass(frozen=True)
class CellGraph:
    """A labeled DAG.

    ``edges`` is normalized to a sorted tuple of ``(src, dst)`` pairs so that
    equal graphs compare and hash equal as Python values. Structural rules are
    not enforced here; see :func:`validate`.
    """

    num_vertices: int
    edges: tuple[tuple[int, int], ...]
    labels: tuple[str, ...]

    def __init__(self, num_vertices: int, edges: Iterable[tuple[int, int]], labels: Sequence[str]):
        object.__setattr__(self, "num_vertices", int(num_vertices))
        object.__setattr__(self, "edges", tuple(sorted({(int(s), int(d)) for s, d in edges})))
        object.__setattr__(self, "labels", tuple(labels))

    @classmethod
    def from_matrix(cls, matrix, labels: Sequence[str]) -> "CellGraph":
        n = len(matrix)
        edges = [(i, j) for i in range(n) for j in range(n) if matrix[i][j]]
        return cls(n, edges, labels)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def predecessors(self) -> tuple[tuple[int, ...], ...]:
        preds: list[list[int]] = [[] for _ in range(self.num_vertices)]
        for s, d in self.edges:
            if 0 <= d < self.num_vertices:
                preds[d].append(s)
        return tuple(tuple(p) for p in preds)

    @cached_property
    def successors(self) -> tuple[tuple[int, ...], ...]:
        succs: list[list[int]] = [[] for _ in range(self.num_vertices)]
        for s, d in self.edges:
            if 0 <= s < self.num_vertices:
                succs[s].append(d)
        return tuple(tuple(s) for s in succs)

    def adjacency(self) -> list[list[int]]:
        m = [[0] * self.num_vertices for _ in range(self.num_vertices)]
        for s, d in self.edges:
            m[s][d] = 1
        return m

    def longest_path(self) -> int:
        """Number of edges on the longest path from vertex 0 to the output."""
        n = self.num_vertices
        dist = [-1] * n
        dist[0] = 0
        for v in range(n):
            if dist[v] < 0:
                continue
            for w in self.successors[v]:
                if dist[v] + 1 > dist[w]:
                    dist[w] = dist[v] + 1
        return max(dist[n - 1], 0)

    def to_text(self) -> str:
        edges = ",".join(f"{s}-{d}" for s, d in self.edges)
        return f"labels={','.join(self.labels)};edges={edges}"

    @classmethod
    def from_text(cls, text: str) -> "CellGraph":
        fields: dict[str, str] = {}
        for part in text.strip().split(";"):
            if not part:
                continue
            key, sep, value = part.partition("=")
            if not sep:
                raise ValueError(f"malformed graph field {part!r}")
            fields[key.strip()] = value.strip()
        if "labels" not in fields:
            raise ValueError(f"graph text has no labels: {text!r}")
        labels = [x.strip() for x in fields["labels"].split(",") if x.strip()]
        edges = []
        for token in fields.get("edges", "").split(","):
            token = token.strip()
            if not token:
                continue
            s, sep, d = token.partition("-")
            if not sep:
                raise ValueError(f"malformed edge {token!r}")
            edges.append((int(s), int(d)))
        return cls(len(labels), edges, labels)

    def __str__(self) -> str:
        return self.to_text()


@dataclass(frozen=True)
class ValidationResult:
    ok: bool
    rule: str | None = None
    detail: str = ""

    def __bool__(self) -> bool:
        return self.ok


_OK = ValidationResult(True)


def _fail(rule: str, detail: str) -> ValidationResult:
    return ValidationResult(False, rule, detail)


def _structure(graph: CellGraph, input_labels: Sequence[str], output_label: str) -> ValidationResult:
    n = graph.num_vertices
    k = len(input_labels)
    if n < k + 1:
        return _fail("vertex_count", f"{n} vertices cannot hold {k} inputs and an output")
    if len(graph.labels) != n:
        return _fail("labels", f"{len(graph.labels)} labels for {n} vertices")
    for s, d in graph.edges:
        if not (0 <= s < n and 0 <= d < n):
            return _fail("edge_bounds", f"edge ({s},{d}) outside 0..{n - 1}")
        if s >= d:
            return _fail("acyclic", f"edge ({s},{d}) does not point forward")
    for i, lab in enumerate(input_labels):
        if graph.labels[i] != lab:
            return _fail("placement", f"vertex {i} must be labelled {lab!r}")
    if graph.labels[n - 1] != output_label:
        return _fail("placement", f"vertex {n - 1} must be labelled {output_label!r}")
    reserved = set(input_labels) | {output_label}
    for v in range(k, n - 1):
        if graph.labels[v] in reserved:
            return _fail("placement", f"vertex {v} carries reserved label {graph.labels[v]!r}")
    for v in range(k, n):
        if not graph.predecessors[v]:
            return _fail("degree", f"vertex {v} has in-degree 0")
    for v in range(n - 1):
        if not graph.successors[v]:
            return _fail("degree", f"vertex {v} has out-degree 0")
    # Implied by the degree rules for forward-only edges; kept as its own rule
    # so callers get a precise reason if the degree checks are ever relaxed.
    seen = {0}
    stack = [0]
    while stack:
        v = stack.pop()
        for w in graph.successors[v]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    if n - 1 not in seen:
        return _fail("connectivity", "no path from vertex 0 to the output")
    return _OK


def validate(graph: CellGraph, spec) -> ValidationResult:
    """Check ``graph`` against the rules of a search space.

    ``spec`` needs ``max_vertices``, ``max_edges``, ``op_labels``,
    ``input_labels`` and ``output_label`` attributes. Returns the first violated
    rule rather than raising.
    """
    if graph.num_vertices > spec.max_vertices:
        return _fail("vertex_cap", f"{graph.num_vertices} vertices exceeds cap {spec.max_vertices}")
    if graph.num_edges > spec.max_edges:
        return _fail("edge_cap", f"{graph.num_edges} edges exceeds cap {spec.max_edges}")
    allowed = set(spec.op_labels)
    reserved = set(spec.input_labels) | {spec.output_label}
    for v, lab in enumerate(graph.labels):
        if lab not in allowed and lab not in reserved:
            return _fail("label_alphabet", f"vertex {v} label {lab!r} not in alphabet")
    return _structure(graph, spec.input_labels, spec.output_label)


def check_structure(graph: CellGraph) -> None:
    """Raise :class:`InvalidGraphError` unless ``graph`` is a well-formed cell.

    A second input is recognised by the ``in1`` label on vertex 1; no caps apply.
    """
    inputs = (INPUT, SECOND_INPUT) if graph.labels[1:2] == (SECOND_INPUT,) else (INPUT,)
    res = _structure(graph, inputs, OUTPUT)
    if not res:
        raise InvalidGraphError(f"{res.rule}: {res.detail}")


def _b2s(data: bytes) -> bytes:
    return hashlib.blake2s(data, digest_size=DIGEST_SIZE).digest()


def digest_unchecked(graph: CellGraph, label_codes: Mapping[str, int] = LABEL_CODES) -> bytes:
    """Canonical digest without validity checks; for hot loops over known-valid graphs."""
    try:
        codes = [label_codes[lab] for lab in graph.labels]
    except KeyError as exc:
        raise InvalidGraphError(f"label {exc.args[0]!r} has no byte code") from None
    return refine_digest(graph.predecessors, graph.successors, codes)


def refine_digest(preds: Sequence[Sequence[int]], succs: Sequence[Sequence[int]], codes: Sequence[int]) -> bytes:
    n = len(codes)
    hashes = [_b2s(bytes((len(preds[v]), len(succs[v]), codes[v]))) for v in range(n)]
    for _ in range(n):
        new = []
        for v in range(n):
            p = sorted([hashes[u] for u in preds[v]])
            s = sorted([hashes[w] for w in succs[v]])
            new.append(_b2s(bytes((len(p),)) + b"".join(p) + bytes((len(s),)) + b"".join(s) + hashes[v]))
        hashes = new
    return _b2s(b"".join(sorted(hashes)))


def canonical_hash(graph: CellGraph, label_codes: Mapping[str, int] = LABEL_CODES) -> bytes:
    """Isomorphism-invariant 32-byte digest of a valid cell.

    Each vertex starts from a hash of (in-degree, out-degree, label code).
    For ``num_vertices`` rounds every vertex hash is replaced by the hash of
    its sorted predecessor hashes, its sorted successor hashes and its own
    current hash (each neighbor list prefixed by its length). The digest is
    the hash of the sorted final vertex hashes. All hashing is blake2s with a
    32-byte digest over raw bytes.
    """
    check_structure(graph)
    return digest_unchecked(graph, label_codes)


def hash_hex(digest: bytes) -> str:
    return digest.hex()


def is_isomorphic_bruteforce(g1: CellGraph, g2: CellGraph) -> bool:
    """Exhaustive search for a label- and edge-preserving vertex bijection.

    Input and output vertices keep their positions; only intermediate vertices
    are permuted. Intended as a test oracle for :func:`canonical_hash`.
    """
    for g in (g1, g2):
        if g.num_vertices > MAX_BRUTEFORCE_VERTICES:
            raise ValueError(f"brute-force isomorphism limited to {MAX_BRUTEFORCE_VERTICES} vertices")
    if g1.num_vertices != g2.num_vertices or g1.num_edges != g2.num_edges:
        return False
    if sorted(g1.labels) != sorted(g2.labels):
        return False
    n = g1.num_vertices
    roles = {INPUT, SECOND_INPUT, OUTPUT}
    fixed = [v for v in range(n) if g1.labels[v] in roles]
    if any(g1.labels[v] != g2.labels[v] for v in fixed):
        return False
    middle = [v for v in range(n) if g1.labels[v] not in roles]
    target = set(g2.edges)
    for perm in itertools.permutations(middle):
        mapping = list(range(n))
        for src, dst in zip(middle, perm):
            mapping[src] = dst
        if any(g1.labels[v] != g2.labels[mapping[v]] for v in middle):
            continue
        if all((mapping[s], mapping[d]) in target for s, d in g1.edges):
            return True
    return False


def permute(graph: CellGraph, order: Sequence[int]) -> CellGraph:
    """Relabel vertices so old vertex ``v`` becomes ``order[v]``.

    The result may have backward edges; callers that need a valid cell should
    pass a topological relabeling (see :func:`random_topological_permutation`).
    """
    labels = [""] * graph.num_vertices
    for v, lab in enumerate(graph.labels):
        labels[order[v]] = lab
    return CellGraph(graph.num_vertices, [(order[s], order[d]) for s, d in graph.edges], labels)


def random_topological_permutation(graph: CellGraph, rng) -> list[int]:
    """A uniformly chosen topological order, returned as a vertex -> position map.

    Inputs stay first and the output stays last, so the permuted cell is valid
    whenever ``graph`` is.
    """
    n = graph.num_vertices
    indeg = [len(p) for p in graph.predecessors]
    roles = {INPUT, SECOND_INPUT}
    order: list[int] = [v for v in range(n) if graph.labels[v] in roles]
    placed = set(order)
    for v in order:
        for w in graph.successors[v]:
            indeg[w] -= 1
    ready = [v for v in range(n) if v not in placed and indeg[v] == 0 and v != n - 1]
    while ready:
        v = ready.pop(int(rng.integers(len(ready))))
        order.append(v)
        for w in graph.successors[v]:
            indeg[w] -= 1
            if indeg[w] == 0 and w != n - 1:
                ready.append(w)
    order.append(n - 1)
    position = [0] * n
    for pos, v in enumerate(order):
        position[v] = pos
    return position
