"""Builds the passage graph from a corpus.

Per passage, an LLM writes in-coming questions (answered by the passage) and
out-coming questions (raised by it but answered elsewhere). Each question
becomes a triplet of (question, keywords, embedding). Every out-coming
triplet is then linked to the most similar in-coming triplet of another
passage, which yields one directed edge per out-coming triplet. Finally the
edge set is deduplicated and capped at ``n * ceil(log2 n)`` edges globally.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from passagehop import prompts
from passagehop.core import (
    Direction,
    Edge,
    Passage,
    PassageGraph,
    QueryTriplet,
    Vertex,
    edge_cap_nlogn,
    edge_rank_key,
)
from passagehop.providers import ChatModel, Embedder, KeywordExtractor, ProviderError
from passagehop.storage import HybridIndex

log = logging.getLogger(__name__)

_NUMBERING = re.compile(r"^\s*(?:[-*•]+|\(?\d+[.):]|\(?[A-Za-z][.)]|Q\d*\s*[:.)-])\s*")

RETRY_SUFFIX = (
    "\n\nYour previous reply contained {found} usable question(s). "
    "Reply again with at least {needed} questions, one per line, each ending with a question mark."
)


class SimulationError(RuntimeError):
    """The LLM produced no usable questions for a passage."""


class IdConflictError(ValueError):
    pass


class BuildError(RuntimeError):
    pass


@dataclass
class IndexConfig:
    min_in_questions: int = 2
    min_out_questions: int = 4
    max_questions: int | None = None
    edge_cap_rule: str | int = "nlogn"
    in_template: str = field(default_factory=lambda: prompts.load(prompts.IN_COMING), repr=False)
    out_template: str = field(default_factory=lambda: prompts.load(prompts.OUT_COMING), repr=False)
    question_retries: int = 2
    workers: int = 1
    exact_limit: int = 50_000
    prefilter_k: int = 64

    def __post_init__(self) -> None:
        if self.min_in_questions < 1 or self.min_out_questions < 1:
            raise ValueError("minimum question counts must be >= 1")
        if self.max_questions is not None and self.max_questions < max(self.min_in_questions, self.min_out_questions):
            raise ValueError("max_questions is below a minimum question count")
        if self.question_retries < 0:
            raise ValueError("question_retries must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        self.edge_cap(2)  # validates the rule

    def edge_cap(self, n_vertices: int) -> int | None:
        """Edge budget for ``n_vertices``; ``None`` means unbounded."""
        rule = self.edge_cap_rule
        if isinstance(rule, int) and not isinstance(rule, bool):
            if rule < 0:
                raise ValueError("fixed edge cap must be >= 0")
            return rule
        if rule == "nlogn":
            return edge_cap_nlogn(n_vertices)
        if rule == "none":
            return None
        raise ValueError(f"unknown edge_cap_rule {rule!r} (use 'nlogn', 'none' or an integer)")

    def planned_calls(self, n_passages: int) -> tuple[int, int]:
        """(minimum, worst-case) LLM calls for indexing ``n_passages``."""
        return 2 * n_passages, 2 * n_passages * (1 + self.question_retries)


@dataclass
class IndexReport:
    vertex_count: int = 0
    edge_count: int = 0
    candidate_count: int = 0
    avg_out_degree: float = 0.0
    question_counts: dict[str, dict[str, int]] = field(default_factory=dict)
    llm_calls: int = 0
    failures: list[dict[str, str]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def refresh(self, graph: PassageGraph) -> None:
        self.vertex_count = len(graph.vertices)
        self.edge_count = graph.edge_count
        self.candidate_count = len(graph.candidates)
        self.avg_out_degree = self.edge_count / self.vertex_count if self.vertex_count else 0.0
        self.question_counts = {
            vid: {"out": len(v.out_triplets), "in": len(v.in_triplets)} for vid, v in sorted(graph.vertices.items())
        }

    def to_dict(self) -> dict:
        return {
            "vertex_count": self.vertex_count,
            "edge_count": self.edge_count,
            "candidate_count": self.candidate_count,
            "avg_out_degree": self.avg_out_degree,
            "llm_calls": self.llm_calls,
            "failures": self.failures,
            "warnings": self.warnings,
            "question_counts": self.question_counts,
        }


@dataclass
class Simulation:
    out_questions: list[str]
    in_questions: list[str]
    llm_calls: int = 0
    shortfalls: list[str] = field(default_factory=list)


# --- corpus ------------------------------------------------------------------


def load_corpus(path: str | Path) -> list[Passage]:
    """Read a JSONL corpus with ``id``, ``text`` and optional ``doc_id`` fields."""
    passages = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                passages.append(Passage(str(obj["id"]), obj["text"], str(obj.get("doc_id", ""))))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad corpus record ({exc})") from exc
    return passages


def _check_corpus(corpus: Sequence[Passage]) -> None:
    if not corpus:
        raise BuildError("corpus is empty")
    seen = set()
    for p in corpus:
        if p.id in seen:
            raise IdConflictError(f"duplicate passage id {p.id!r}")
        seen.add(p.id)


# --- query simulation ----------------------------------------------------------


def parse_questions(text: str) -> tuple[list[str], list[str]]:
    """Split an LLM reply into (questions, rejected lines).

    One question per line; list markers such as ``1.``, ``2)``, ``-`` or
    ``Q3:`` are stripped. Lines that do not end in ``?`` are rejected.
    """
    questions, rejected = [], []
    for raw in text.splitlines():
        line = _NUMBERING.sub("", raw.strip()).strip().strip('"').strip()
        if not line:
            continue
        if line.endswith("?") and len(line) > 1:
            questions.append(line)
        else:
            rejected.append(line)
    return questions, rejected


def _ask(chat: ChatModel, template: str, passage: Passage, needed: int, retries: int, cap: int | None) -> tuple[list[str], int]:
    base = prompts.render(template, passage=passage.text)
    found: list[str] = []
    calls = 0
    for attempt in range(retries + 1):
        prompt = base if attempt == 0 else base + RETRY_SUFFIX.format(found=len(found), needed=needed)
        calls += 1
        reply = chat.chat(prompt)
        questions, rejected = parse_questions(reply)
        if rejected:
            log.debug("passage %s: dropped %d malformed line(s)", passage.id, len(rejected))
        for q in questions:
            if q not in found:
                found.append(q)
        if len(found) >= needed:
            break
    if cap is not None:
        found = found[:cap]
    return found, calls


def simulate_queries(passage: Passage, chat: ChatModel, config: IndexConfig) -> Simulation:
    """Generate out-coming and in-coming questions for one passage.

    Short replies are re-prompted up to ``config.question_retries`` times.
    A remaining shortfall is reported but the questions found are kept;
    a direction with no usable question at all raises :class:`SimulationError`.
    """
    outs, out_calls = _ask(
        chat, config.out_template, passage, config.min_out_questions, config.question_retries, config.max_questions
    )
    ins, in_calls = _ask(
        chat, config.in_template, passage, config.min_in_questions, config.question_retries, config.max_questions
    )
    sim = Simulation(outs, ins, out_calls + in_calls)
    if not outs or not ins:
        raise SimulationError(
            f"passage {passage.id!r}: no usable {'out-coming' if not outs else 'in-coming'} questions "
            f"after {config.question_retries} retries"
        )
    if len(outs) < config.min_out_questions:
        sim.shortfalls.append(f"{len(outs)}/{config.min_out_questions} out-coming questions")
    if len(ins) < config.min_in_questions:
        sim.shortfalls.append(f"{len(ins)}/{config.min_in_questions} in-coming questions")
    return sim


def build_triplets(
    questions: Sequence[str],
    direction: Direction,
    embedder: Embedder,
    extractor: KeywordExtractor,
) -> list[QueryTriplet]:
    return [
        QueryTriplet(q, extractor.extract(q), embedder.embed(q), direction, i) for i, q in enumerate(questions)
    ]


def make_vertex(
    passage: Passage,
    chat: ChatModel,
    embedder: Embedder,
    extractor: KeywordExtractor,
    config: IndexConfig,
) -> tuple[Vertex, Simulation]:
    sim = simulate_queries(passage, chat, config)
    try:
        vertex = Vertex(
            passage=passage,
            out_triplets=tuple(build_triplets(sim.out_questions, Direction.OUT, embedder, extractor)),
            in_triplets=tuple(build_triplets(sim.in_questions, Direction.IN, embedder, extractor)),
            passage_keywords=extractor.extract(passage.text),
            passage_embedding=embedder.embed(passage.text),
        )
    except ProviderError as exc:
        raise ProviderError(f"passage {passage.id!r}: {exc}", exc.status) from exc
    return vertex, sim


# --- edge merging -----------------------------------------------------------------


def _in_index(vertices: Iterable[Vertex], dim: int) -> HybridIndex:
    keys, feats = [], []
    for v in vertices:
        for t in v.in_triplets:
            keys.append((v.id, t.ordinal))
            feats.append(t)
    return HybridIndex(keys, feats, dim)


def _owner_rows(index: HybridIndex) -> dict[str, np.ndarray]:
    rows: dict[str, list[int]] = {}
    for i, (owner, _) in enumerate(index.keys):
        rows.setdefault(owner, []).append(i)
    return {k: np.array(v, dtype=np.int64) for k, v in rows.items()}


def _best_match(
    source: Vertex,
    out: QueryTriplet,
    index: HybridIndex,
    owner_rows: dict[str, np.ndarray],
    vertices: dict[str, Vertex],
    prefilter: int | None,
) -> Edge | None:
    if prefilter is not None and prefilter < len(index):
        rows = index.dense_candidates(out, prefilter)
        scores = index.scores(out, rows)
    else:
        rows = np.arange(len(index))
        scores = index.scores(out)
    own = owner_rows.get(source.id)
    if own is not None:
        scores = np.where(np.isin(rows, own), -np.inf, scores)
    if scores.size == 0 or not np.isfinite(scores.max()):
        return None
    # rows ascend by (vertex id, ordinal), so argmax's first hit is the tie winner
    best = int(np.argmax(scores))
    target_id, ordinal = index.keys[rows[best]]
    matched = vertices[target_id].in_triplets[ordinal]
    return Edge(
        source_id=source.id,
        target_id=target_id,
        question=matched.question,
        keywords=matched.keywords | out.keywords,
        embedding=matched.embedding,
        sim_score=float(scores[best]),
        source_ordinal=out.ordinal,
        target_ordinal=ordinal,
    )


def match_candidates(
    vertices: Sequence[Vertex],
    dim: int,
    *,
    sources: Iterable[Vertex] | None = None,
    exact_limit: int = 50_000,
    prefilter_k: int = 64,
) -> dict[tuple[str, int], Edge]:
    """Best in-coming match of every out-coming triplet of ``sources``.

    Candidates exclude the source's own in-coming triplets. Search is exact
    while the total triplet count is at most ``exact_limit``; beyond that
    only the ``prefilter_k`` nearest in-coming triplets by dense cosine are
    re-scored exactly.
    """
    by_id = {v.id: v for v in vertices}
    index = _in_index(vertices, dim)
    owner_rows = _owner_rows(index)
    total = sum(len(v.in_triplets) + len(v.out_triplets) for v in vertices)
    prefilter = prefilter_k if total > exact_limit else None
    found: dict[tuple[str, int], Edge] = {}
    for source in sources if sources is not None else vertices:
        for out in source.out_triplets:
            edge = _best_match(source, out, index, owner_rows, by_id, prefilter)
            if edge is not None:
                found[(source.id, out.ordinal)] = edge
    return found


def dedupe_edges(edges: Iterable[Edge]) -> list[Edge]:
    """Drop edges identical in (source, target, matched triplet, keywords),
    keeping the one from the lowest out-coming ordinal."""
    kept: dict[tuple, Edge] = {}
    for e in sorted(edges, key=lambda e: e.key):
        sig = (e.source_id, e.target_id, e.target_ordinal, e.keywords)
        kept.setdefault(sig, e)
    return sorted(kept.values(), key=lambda e: e.key)


def merge_edges(vertices: Sequence[Vertex], *, exact_limit: int = 50_000, prefilter_k: int = 64) -> list[Edge]:
    if not vertices:
        return []
    dim = vertices[0].passage_embedding.dim
    pool = match_candidates(vertices, dim, exact_limit=exact_limit, prefilter_k=prefilter_k)
    return dedupe_edges(pool.values())


def cap_edges(edges: Sequence[Edge], cap: int | None) -> list[Edge]:
    """Keep the ``cap`` highest-scoring edges (ties by ascending source, target, ordinal)."""
    if cap is None or len(edges) <= cap:
        return sorted(edges, key=lambda e: e.key)
    ranked = sorted(edges, key=edge_rank_key)[:cap]
    return sorted(ranked, key=lambda e: e.key)


def select_edges(graph: PassageGraph, config: IndexConfig) -> None:
    """Recompute ``graph.edges`` from its candidate pool."""
    graph.edge_cap = config.edge_cap(len(graph.vertices))
    graph.set_edges(cap_edges(dedupe_edges(graph.candidates.values()), graph.edge_cap))


# --- graph construction --------------------------------------------------------


def _index_passages(
    passages: Sequence[Passage],
    chat: ChatModel,
    embedder: Embedder,
    extractor: KeywordExtractor,
    config: IndexConfig,
    report: IndexReport,
) -> list[Vertex]:
    def work(p: Passage):
        try:
            return make_vertex(p, chat, embedder, extractor, config)
        except (ProviderError, SimulationError, ValueError) as exc:
            return exc

    if config.workers > 1 and len(passages) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(work, passages))
    else:
        results = [work(p) for p in passages]

    vertices = []
    for p, res in zip(passages, results):
        if isinstance(res, Exception):
            report.failures.append({"passage_id": p.id, "kind": type(res).__name__, "message": str(res)})
            log.warning("passage %s skipped: %s", p.id, res)
            continue
        vertex, sim = res
        report.llm_calls += sim.llm_calls
        for note in sim.shortfalls:
            report.failures.append({"passage_id": p.id, "kind": "Shortfall", "message": note})
        vertices.append(vertex)
    return vertices


def build_graph(
    corpus: Sequence[Passage],
    config: IndexConfig,
    *,
    chat: ChatModel,
    embedder: Embedder,
    extractor: KeywordExtractor,
) -> tuple[PassageGraph, IndexReport]:
    _check_corpus(corpus)
    report = IndexReport()
    vertices = _index_passages(corpus, chat, embedder, extractor, config, report)
    if not vertices:
        raise BuildError(f"no passage could be indexed ({len(report.failures)} failures)")
    graph = PassageGraph(dim=embedder.dim)
    for v in vertices:
        graph.add_vertex(v)
    if len(vertices) == 1:
        report.warnings.append("single-vertex corpus: no edges can be formed")
    graph.candidates = match_candidates(
        vertices, graph.dim, exact_limit=config.exact_limit, prefilter_k=config.prefilter_k
    )
    select_edges(graph, config)
    report.refresh(graph)
    return graph, report


def _better(new: Edge, old: Edge | None) -> bool:
    if old is None:
        return True
    return (-new.sim_score, new.target_id, new.target_ordinal) < (-old.sim_score, old.target_id, old.target_ordinal)


def insert_vertex(graph: PassageGraph, vertex: Vertex, config: IndexConfig) -> None:
    """Link an already-built vertex into ``graph`` and re-apply the cap.

    The new vertex's out-coming triplets are matched against every existing
    in-coming triplet; existing out-coming triplets are re-matched against the
    new vertex's in-coming triplets and switch target only on a strictly better
    (score, then id, then ordinal) match. The resulting pool is exactly the one
    a batch build over the extended corpus would produce.
    """
    if vertex.id in graph.vertices:
        raise IdConflictError(f"passage id {vertex.id!r} already in graph")
    graph.add_vertex(vertex)
    vertices = list(graph.vertices.values())
    fresh = match_candidates(
        vertices, graph.dim, sources=[vertex], exact_limit=config.exact_limit, prefilter_k=config.prefilter_k
    )
    graph.candidates.update(fresh)
    if vertex.in_triplets:
        others = [v for v in vertices if v.id != vertex.id]
        index = _in_index([vertex], graph.dim)
        owner_rows = _owner_rows(index)
        lookup = {vertex.id: vertex}
        for source in others:
            for out in source.out_triplets:
                edge = _best_match(source, out, index, owner_rows, lookup, None)
                key = (source.id, out.ordinal)
                if edge is not None and _better(edge, graph.candidates.get(key)):
                    graph.candidates[key] = edge
    select_edges(graph, config)


def add_passage(
    graph: PassageGraph,
    passage: Passage,
    config: IndexConfig,
    *,
    chat: ChatModel,
    embedder: Embedder,
    extractor: KeywordExtractor,
) -> PassageGraph:
    if passage.id in graph.vertices:
        raise IdConflictError(f"passage id {passage.id!r} already in graph")
    vertex, _ = make_vertex(passage, chat, embedder, extractor, config)
    insert_vertex(graph, vertex, config)
    return graph
