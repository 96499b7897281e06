"""Graph persistence, the hybrid keyword/vector index, and corpus statistics.

Archive layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"PSGGRAPH"
    8       2     format version (u16)
    10      2     reserved, zero
    12      4     embedding dim (u32)
    16      8     metadata length M in bytes (u64)
    24      8     vector block length V in bytes (u64)
    32      32    SHA-256 over the M + V payload bytes
    64      M     UTF-8 JSON: vertices, candidate edges, edges, build metadata
    64+M    V     float64 rows, row-major; JSON entries refer to rows by index

Writes go to a temporary file in the target directory that is then renamed
over the destination, so an interrupted save never leaves a partial archive.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from passagehop.core import (
    DimensionError,
    Direction,
    Edge,
    Embedding,
    HasFeatures,
    Passage,
    PassageGraph,
    QueryTriplet,
    Vertex,
)

MAGIC = b"PSGGRAPH"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sHHIQQ32s")


class ArchiveError(Exception):
    """Base class for archive read/write failures."""


class ChecksumError(ArchiveError):
    pass


class VersionError(ArchiveError):
    def __init__(self, found: int, supported: int = FORMAT_VERSION) -> None:
        super().__init__(f"archive format version {found} is not supported (this build reads version {supported})")
        self.found = found
        self.supported = supported


# --- hybrid index ---------------------------------------------------------------


class HybridIndex:
    """Exact hybrid (Jaccard + cosine) scorer over a fixed set of feature rows.

    Rows are sorted by key, so posting lists (keyword -> row numbers) are
    sorted by owner. ``scores`` reproduces :func:`passagehop.core.hybrid_sim`
    bit-for-bit for every row.
    """

    def __init__(self, keys: Sequence[Hashable], features: Sequence[HasFeatures], dim: int) -> None:
        order = sorted(range(len(keys)), key=lambda i: keys[i])
        self.keys = [keys[i] for i in order]
        self.dim = dim
        kw = [features[i].keywords for i in order]
        self.sizes = np.array([len(k) for k in kw], dtype=np.int64)
        postings: dict[str, list[int]] = {}
        for row, terms in enumerate(kw):
            for term in terms:
                postings.setdefault(term, []).append(row)
        self.postings = {t: np.array(rows, dtype=np.int64) for t, rows in postings.items()}
        if order:
            self.matrix = np.ascontiguousarray(np.stack([features[i].embedding.values for i in order]))
        else:
            self.matrix = np.zeros((0, dim), dtype=np.float64)
        self.norms = np.sqrt((self.matrix * self.matrix).sum(axis=1))
        self._unit: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.keys)

    def scores(self, query: HasFeatures, rows: np.ndarray | None = None) -> np.ndarray:
        """Hybrid similarity of ``query`` against every row (or just ``rows``)."""
        if query.embedding.dim != self.dim:
            raise DimensionError(f"query dim {query.embedding.dim} != index dim {self.dim}")
        n = len(self.keys)
        inter = np.zeros(n, dtype=np.int64)
        for term in query.keywords:
            hit = self.postings.get(term)
            if hit is not None:
                inter[hit] += 1
        matrix, norms, sizes = self.matrix, self.norms, self.sizes
        if rows is not None:
            inter, matrix, norms, sizes = inter[rows], matrix[rows], norms[rows], sizes[rows]
        union = sizes + len(query.keywords) - inter
        jac = np.zeros(len(inter), dtype=np.float64)
        np.divide(inter, union, out=jac, where=union > 0)

        q = query.embedding
        cos = np.zeros(len(inter), dtype=np.float64)
        if q.norm > 0:
            dots = (matrix * q.values).sum(axis=1)
            denom = norms * q.norm
            np.divide(dots, denom, out=cos, where=denom > 0)
            np.clip(cos, 0.0, 1.0, out=cos)
        return (jac + cos) / 2

    def dense_candidates(self, query: HasFeatures, k: int) -> np.ndarray:
        """Rows of the ``k`` largest approximate cosines (unit-matrix product)."""
        if self._unit is None:
            safe = np.where(self.norms > 0, self.norms, 1.0)
            self._unit = self.matrix / safe[:, None]
        if k >= len(self.keys):
            return np.arange(len(self.keys))
        q = query.embedding
        approx = self._unit @ (q.values / q.norm if q.norm > 0 else q.values)
        return np.sort(np.argpartition(-approx, k)[:k])

    def rank(
        self,
        query: HasFeatures,
        limit: int | None = None,
        prefilter: int | None = None,
    ) -> list[tuple[Hashable, float]]:
        """Rows ordered by descending score, ties by ascending key.

        With ``prefilter`` set, only the ``prefilter`` best rows by dense cosine
        are re-scored exactly; by default every row is scored.
        """
        if not self.keys:
            return []
        if prefilter is not None and prefilter < len(self.keys):
            rows = self.dense_candidates(query, prefilter)
            scores = self.scores(query, rows)
        else:
            rows = np.arange(len(self.keys))
            scores = self.scores(query)
        # lexsort: last key is primary; rows are already in key order
        order = np.lexsort((rows, -scores))
        if limit is not None:
            order = order[:limit]
        return [(self.keys[rows[i]], float(scores[i])) for i in order]


def edge_index(graph: PassageGraph) -> HybridIndex:
    """Index over the graph's edges keyed by ``Edge.key``; cached on the graph."""
    cached = graph._cache.get("edge_index")
    if cached is None:
        edges = graph.all_edges()
        cached = HybridIndex([e.key for e in edges], edges, graph.dim)
        graph._cache["edge_index"] = cached
        graph._cache["edge_by_key"] = {e.key: e for e in edges}
    return cached


def vertex_index(graph: PassageGraph) -> HybridIndex:
    """Index over passage-level features keyed by vertex id; cached on the graph."""
    cached = graph._cache.get("vertex_index")
    if cached is None:
        ids = sorted(graph.vertices)
        cached = HybridIndex(ids, [graph.vertices[i].features for i in ids], graph.dim)
        graph._cache["vertex_index"] = cached
    return cached


def edge_by_key(graph: PassageGraph, key: tuple) -> Edge:
    edge_index(graph)
    return graph._cache["edge_by_key"][key]


def score_all_edges(query: HasFeatures, index: HybridIndex, prefilter: int | None = None) -> list[tuple[tuple, float]]:
    return index.rank(query, prefilter=prefilter)


# --- statistics --------------------------------------------------------------


@dataclass
class GraphStats:
    vertex_count: int
    edge_count: int
    avg_out_degree: float
    avg_passage_length: float
    avg_out_questions: float
    avg_in_questions: float
    dim: int
    edge_cap: int | None

    def to_dict(self) -> dict:
        return asdict(self)


def stats(graph: PassageGraph) -> GraphStats:
    n = len(graph.vertices)
    e = graph.edge_count
    verts = graph.vertices.values()
    return GraphStats(
        vertex_count=n,
        edge_count=e,
        avg_out_degree=e / n if n else 0.0,
        avg_passage_length=sum(len(v.passage.text) for v in verts) / n if n else 0.0,
        avg_out_questions=sum(len(v.out_triplets) for v in verts) / n if n else 0.0,
        avg_in_questions=sum(len(v.in_triplets) for v in verts) / n if n else 0.0,
        dim=graph.dim,
        edge_cap=graph.edge_cap,
    )


# --- fingerprint -------------------------------------------------------------


def _triplet_doc(t: QueryTriplet) -> dict:
    return {
        "q": t.question,
        "k": sorted(t.keywords),
        "v": t.embedding.values.tobytes().hex(),
        "d": t.direction.value,
        "o": t.ordinal,
    }


def _edge_doc(e: Edge) -> dict:
    return {
        "s": e.source_id,
        "t": e.target_id,
        "q": e.question,
        "k": sorted(e.keywords),
        "v": e.embedding.values.tobytes().hex(),
        "score": e.sim_score.hex(),
        "so": e.source_ordinal,
        "to": e.target_ordinal,
    }


def fingerprint(graph: PassageGraph) -> str:
    """Stable SHA-256 over dim, sorted vertices and sorted edges."""
    doc = {
        "dim": graph.dim,
        "vertices": [
            {
                "id": v.passage.id,
                "text": v.passage.text,
                "doc": v.passage.doc_id,
                "k": sorted(v.passage_keywords),
                "v": v.passage_embedding.values.tobytes().hex(),
                "out": [_triplet_doc(t) for t in v.out_triplets],
                "in": [_triplet_doc(t) for t in v.in_triplets],
            }
            for _, v in sorted(graph.vertices.items())
        ],
        "edges": [_edge_doc(e) for e in graph.all_edges()],
    }
    blob = json.dumps(doc, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# --- save / load ----------------------------------------------------------------


class _Rows:
    def __init__(self) -> None:
        self.rows: list[np.ndarray] = []

    def add(self, emb: Embedding) -> int:
        self.rows.append(emb.values)
        return len(self.rows) - 1


def _encode_triplet(t: QueryTriplet, rows: _Rows) -> dict:
    return {"question": t.question, "keywords": sorted(t.keywords), "row": rows.add(t.embedding), "ordinal": t.ordinal}


def _encode_edge(e: Edge, rows: _Rows) -> dict:
    return {
        "source": e.source_id,
        "target": e.target_id,
        "question": e.question,
        "keywords": sorted(e.keywords),
        "row": rows.add(e.embedding),
        "score": e.sim_score.hex(),
        "source_ordinal": e.source_ordinal,
        "target_ordinal": e.target_ordinal,
    }


def save(graph: PassageGraph, path: str | Path, metadata: dict | None = None) -> Path:
    path = Path(path)
    rows = _Rows()
    doc = {
        "dim": graph.dim,
        "edge_cap": graph.edge_cap,
        "fingerprint": fingerprint(graph),
        "metadata": metadata or {},
        "vertices": [
            {
                "id": v.passage.id,
                "text": v.passage.text,
                "doc_id": v.passage.doc_id,
                "keywords": sorted(v.passage_keywords),
                "row": rows.add(v.passage_embedding),
                "out": [_encode_triplet(t, rows) for t in v.out_triplets],
                "in": [_encode_triplet(t, rows) for t in v.in_triplets],
            }
            for _, v in sorted(graph.vertices.items())
        ],
        "candidates": [_encode_edge(e, rows) for _, e in sorted(graph.candidates.items())],
        "edges": [_encode_edge(e, rows) for e in graph.all_edges()],
    }
    meta = json.dumps(doc, sort_keys=True, ensure_ascii=False).encode("utf-8")
    block = np.stack(rows.rows).astype("<f8").tobytes() if rows.rows else b""
    digest = hashlib.sha256(meta + block).digest()
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, 0, graph.dim, len(meta), len(block), digest)

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(meta)
            fh.write(block)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise ChecksumError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, _, dim, meta_len, block_len, digest = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise ArchiveError(f"{path}: not a passage graph archive")
    if version != FORMAT_VERSION:
        raise VersionError(version)
    return {"version": version, "dim": dim, "meta_len": meta_len, "block_len": block_len, "digest": digest}


def load(path: str | Path) -> PassageGraph:
    path = Path(path)
    head = read_header(path)
    with path.open("rb") as fh:
        fh.seek(_HEADER.size)
        payload = fh.read()
    expected = head["meta_len"] + head["block_len"]
    if len(payload) != expected:
        raise ChecksumError(f"{path}: payload is {len(payload)} bytes, header says {expected}")
    if hashlib.sha256(payload).digest() != head["digest"]:
        raise ChecksumError(f"{path}: checksum mismatch")

    dim = head["dim"]
    doc = json.loads(payload[: head["meta_len"]].decode("utf-8"))
    block = np.frombuffer(payload[head["meta_len"] :], dtype="<f8")
    matrix = block.reshape(-1, dim) if block.size else np.zeros((0, dim))

    def emb(row: int) -> Embedding:
        return Embedding(matrix[row])

    def triplet(d: dict, direction: Direction) -> QueryTriplet:
        return QueryTriplet(d["question"], frozenset(d["keywords"]), emb(d["row"]), direction, d["ordinal"])

    def edge(d: dict) -> Edge:
        return Edge(
            d["source"],
            d["target"],
            d["question"],
            frozenset(d["keywords"]),
            emb(d["row"]),
            float.fromhex(d["score"]),
            d["source_ordinal"],
            d["target_ordinal"],
        )

    graph = PassageGraph(dim=dim, edge_cap=doc["edge_cap"])
    for v in doc["vertices"]:
        graph.add_vertex(
            Vertex(
                passage=Passage(v["id"], v["text"], v["doc_id"]),
                out_triplets=tuple(triplet(t, Direction.OUT) for t in v["out"]),
                in_triplets=tuple(triplet(t, Direction.IN) for t in v["in"]),
                passage_keywords=frozenset(v["keywords"]),
                passage_embedding=emb(v["row"]),
            )
        )
    for d in doc["candidates"]:
        e = edge(d)
        graph.candidates[(e.source_id, e.source_ordinal)] = e
    graph.set_edges(edge(d) for d in doc["edges"])
    if fingerprint(graph) != doc["fingerprint"]:
        raise ChecksumError(f"{path}: decoded graph does not match its stored fingerprint")
    return graph


def load_metadata(path: str | Path) -> dict:
    """Build metadata stored in an archive, without decoding the graph."""
    head = read_header(path)
    with open(path, "rb") as fh:
        fh.seek(_HEADER.size)
        meta = fh.read(head["meta_len"])
    return json.loads(meta.decode("utf-8")).get("metadata", {})
