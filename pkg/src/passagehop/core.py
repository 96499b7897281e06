"""Domain types and the pure similarity/scoring math.

Everything here is side-effect free. Scores are kept in [0, 1]:

* ``jaccard`` of two empty keyword sets is 0 (no lexical evidence is not a match);
* ``cosine`` is clamped to [0, 1] and is 0 when either vector is all-zero.

Dot products are computed as ``np.sum(a * b)`` rather than ``np.dot``; the
vectorised index in :mod:`passagehop.storage` uses the row-wise form of the same
reduction, which yields bit-identical floats, so indexed rankings match
brute-force rankings exactly.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, NamedTuple, Protocol

import numpy as np

Keywords = frozenset
"""A normalized keyword set (case-folded, no empty members)."""

VisitCounter = Counter
"""Vertex id -> visit count, in first-visit order."""

EdgeKey = tuple  # (source_id, target_id, source_ordinal)


class DimensionError(ValueError):
    """Embedding dimensions disagree, or a vector is malformed."""


def make_keywords(terms: Iterable[str]) -> frozenset[str]:
    out = set()
    for term in terms:
        t = term.strip().casefold()
        if t:
            out.add(t)
    return frozenset(out)


class Embedding:
    """Immutable, finite, 1-D float64 vector with a cached L2 norm."""

    __slots__ = ("values", "norm")

    def __init__(self, values) -> None:
        arr = np.array(values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise DimensionError(f"embedding must be a non-empty 1-D vector, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DimensionError("embedding contains non-finite components")
        arr.setflags(write=False)
        self.values = arr
        self.norm = float(np.sqrt(np.sum(arr * arr)))

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Embedding):
            return NotImplemented
        return self.values.shape == other.values.shape and bool(np.array_equal(self.values, other.values))

    def __hash__(self) -> int:
        return hash(self.values.tobytes())

    def __repr__(self) -> str:
        return f"Embedding(dim={self.dim}, norm={self.norm:.4f})"


class Direction(str, Enum):
    OUT = "out"
    IN = "in"


class HasFeatures(Protocol):
    keywords: frozenset[str]
    embedding: Embedding


class Features(NamedTuple):
    keywords: frozenset[str]
    embedding: Embedding


@dataclass(frozen=True)
class Passage:
    id: str
    text: str
    doc_id: str = ""

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("passage id must be non-empty")
        if not self.text or not self.text.strip():
            raise ValueError(f"passage {self.id!r} has empty text")


@dataclass(frozen=True)
class QueryTriplet:
    """A pseudo-query with its keyword set and embedding."""

    question: str
    keywords: frozenset[str]
    embedding: Embedding
    direction: Direction
    ordinal: int

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise ValueError("triplet question must be non-empty")


@dataclass(frozen=True)
class Vertex:
    passage: Passage
    out_triplets: tuple[QueryTriplet, ...]
    in_triplets: tuple[QueryTriplet, ...]
    passage_keywords: frozenset[str]
    passage_embedding: Embedding

    @property
    def id(self) -> str:
        return self.passage.id

    @property
    def features(self) -> Features:
        return Features(self.passage_keywords, self.passage_embedding)


@dataclass(frozen=True)
class Edge:
    """Directed link created by matching an out-coming triplet of ``source_id``
    to the most similar in-coming triplet of ``target_id``.

    ``question`` and ``embedding`` come from the matched in-coming triplet;
    ``keywords`` is the union of both triplets' keywords.
    """

    source_id: str
    target_id: str
    question: str
    keywords: frozenset[str]
    embedding: Embedding
    sim_score: float
    source_ordinal: int
    target_ordinal: int

    def __post_init__(self) -> None:
        if self.source_id == self.target_id:
            raise ValueError(f"self-loop edge on {self.source_id!r}")

    @property
    def key(self) -> EdgeKey:
        return (self.source_id, self.target_id, self.source_ordinal)


def edge_rank_key(edge: Edge) -> tuple:
    """Sort key: higher score first, then ascending (source, target, ordinal)."""
    return (-edge.sim_score, edge.source_id, edge.target_id, edge.source_ordinal)


@dataclass
class PassageGraph:
    """Directed passage graph.

    ``candidates`` holds the best match of every out-coming triplet, keyed by
    ``(source_id, source_ordinal)``; ``edges`` is the deduplicated, capped
    selection of those candidates that traversal actually walks.
    """

    dim: int
    vertices: dict[str, Vertex] = field(default_factory=dict)
    edges: dict[str, list[Edge]] = field(default_factory=dict)
    candidates: dict[tuple[str, int], Edge] = field(default_factory=dict)
    edge_cap: int | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def out_edges(self, vertex_id: str) -> list[Edge]:
        return self.edges.get(vertex_id, [])

    def all_edges(self) -> list[Edge]:
        found = [e for src in sorted(self.edges) for e in self.edges[src]]
        found.sort(key=lambda e: e.key)
        return found

    @property
    def edge_count(self) -> int:
        return sum(len(v) for v in self.edges.values())

    def set_edges(self, edges: Iterable[Edge]) -> None:
        adjacency: dict[str, list[Edge]] = {}
        for edge in sorted(edges, key=lambda e: e.key):
            if edge.source_id not in self.vertices or edge.target_id not in self.vertices:
                raise KeyError(f"edge {edge.key} references an unknown vertex")
            adjacency.setdefault(edge.source_id, []).append(edge)
        self.edges = adjacency
        self._cache.clear()

    def add_vertex(self, vertex: Vertex) -> None:
        check_dim(vertex.passage_embedding, self.dim)
        for t in (*vertex.out_triplets, *vertex.in_triplets):
            check_dim(t.embedding, self.dim)
        self.vertices[vertex.id] = vertex
        self._cache.clear()


def check_dim(embedding: Embedding, dim: int) -> None:
    if embedding.dim != dim:
        raise DimensionError(f"embedding dim {embedding.dim} != graph dim {dim}")


# --- scoring ----------------------------------------------------------------


def jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    if not a and not b:
        return 0.0
    inter = len(a & b)
    return inter / (len(a) + len(b) - inter)


def cosine(a: Embedding, b: Embedding) -> float:
    if a.dim != b.dim:
        raise DimensionError(f"cannot compare dims {a.dim} and {b.dim}")
    if a.norm == 0.0 or b.norm == 0.0:
        return 0.0
    c = float(np.sum(a.values * b.values)) / (a.norm * b.norm)
    return min(1.0, max(0.0, c))


def hybrid_sim(a: HasFeatures, b: HasFeatures) -> float:
    """Mean of keyword Jaccard and clamped embedding cosine."""
    return (jaccard(a.keywords, b.keywords) + cosine(a.embedding, b.embedding)) / 2


def importance(counter: Mapping[str, int], vertex_id: str) -> float:
    if vertex_id not in counter:  # Counter would silently answer 0
        raise KeyError(vertex_id)
    count = counter[vertex_id]
    return count / sum(counter.values())


def helpfulness(vertex: Vertex, query: HasFeatures, counter: Mapping[str, int]) -> float:
    return (hybrid_sim(vertex.features, query) + importance(counter, vertex.id)) / 2


def edge_cap_nlogn(n: int) -> int:
    """``n * ceil(log2 n)``; 0 for n <= 1."""
    if n <= 1:
        return 0
    return n * (n - 1).bit_length()
