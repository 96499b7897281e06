"""Retrieve, reason, prune.

1. Score every edge against the query's keywords and embedding; the targets
   of the ``top_k`` best edges seed both the frontier and the visit counter.
2. For ``n_hop`` rounds, each frontier vertex picks one out-edge (by LLM or
   by similarity). A target seen for the first time joins the next frontier
   with count 1; an already-counted target only has its count incremented.
3. Rank every counted vertex by helpfulness (mean of passage/query
   similarity and normalized visit count) and keep the ``top_k`` best.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Sequence

from passagehop import prompts
from passagehop.core import (
    Edge,
    Embedding,
    Passage,
    PassageGraph,
    Vertex,
    check_dim,
    helpfulness,
    hybrid_sim,
    importance,
)
from passagehop.providers import ChatModel, Embedder, KeywordExtractor, ProviderError
from passagehop.storage import edge_by_key, edge_index, vertex_index

log = logging.getLogger(__name__)

_NONE_RE = re.compile(r"\bnone\b", re.IGNORECASE)
_INT_RE = re.compile(r"\d+")


@dataclass(frozen=True)
class QueryRepr:
    raw: str
    keywords: frozenset[str]
    embedding: Embedding


class ReasonerMode(str, Enum):
    LLM = "llm"
    SIMILARITY = "similarity"


@dataclass
class TraversalParams:
    top_k: int = 20
    n_hop: int = 4
    reasoner_mode: ReasonerMode = ReasonerMode.LLM
    workers: int = 1

    def __post_init__(self) -> None:
        self.reasoner_mode = ReasonerMode(self.reasoner_mode)
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.n_hop < 0:
            raise ValueError("n_hop must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class Decision:
    edge: Edge | None
    verdict: str
    llm_called: bool = False
    response: str | None = None


class Reasoner:
    """Chooses the out-edge to follow from a vertex.

    In LLM mode the model sees the query and the numbered out-edge questions
    and answers with one number. Unparseable or out-of-range answers, and
    provider failures, fall back to the similarity choice. A "none" answer
    stops the hop unless ``strict`` is set, in which case the similarity
    choice is taken instead.
    """

    def __init__(
        self,
        mode: ReasonerMode | str = ReasonerMode.SIMILARITY,
        chat: ChatModel | None = None,
        template: str | None = None,
        strict: bool = False,
    ) -> None:
        self.mode = ReasonerMode(mode)
        if self.mode is ReasonerMode.LLM and chat is None:
            raise ValueError("LLM reasoning needs a chat provider")
        self.chat = chat
        self.template = template if template is not None else prompts.load(prompts.REASONING)
        self.strict = strict

    @classmethod
    def similarity(cls) -> Reasoner:
        return cls(ReasonerMode.SIMILARITY)

    @classmethod
    def llm(cls, chat: ChatModel, template: str | None = None, strict: bool = False) -> Reasoner:
        return cls(ReasonerMode.LLM, chat, template, strict)

    def prompt(self, query: QueryRepr, out_edges: Sequence[Edge]) -> str:
        numbered = "\n".join(f"{i}. {e.question}" for i, e in enumerate(out_edges, 1))
        return prompts.render(self.template, query=query.raw, numbered_questions=numbered)

    def decide(self, vertex: Vertex, out_edges: Sequence[Edge], query: QueryRepr) -> Decision:
        if not out_edges:
            return Decision(None, "no-out-edges")
        if self.mode is ReasonerMode.SIMILARITY:
            return Decision(similarity_choice(out_edges, query), "similarity")
        try:
            reply = self.chat.chat(self.prompt(query, out_edges))
        except ProviderError as exc:
            log.warning("reasoner failed at %s, using similarity: %s", vertex.id, exc)
            return Decision(similarity_choice(out_edges, query), "fallback-provider-error", True, str(exc))
        match = _INT_RE.search(reply)
        if match is None and _NONE_RE.search(reply):
            if self.strict:
                return Decision(similarity_choice(out_edges, query), "none-forced", True, reply)
            return Decision(None, "none", True, reply)
        if match is not None and 1 <= int(match.group()) <= len(out_edges):
            return Decision(out_edges[int(match.group()) - 1], "llm", True, reply)
        return Decision(similarity_choice(out_edges, query), "fallback-unparseable", True, reply)


def similarity_choice(out_edges: Sequence[Edge], query: QueryRepr) -> Edge:
    """Out-edge most similar to the query; ties go to the smallest edge key."""
    return min(out_edges, key=lambda e: (-hybrid_sim(query, e), e.key))


@dataclass
class TraversalTrace:
    query: str
    top_k: int
    n_hop: int
    mode: str
    seeds: list[dict] = field(default_factory=list)
    rounds: list[list[str]] = field(default_factory=list)
    hops: list[dict] = field(default_factory=list)
    counter: dict[str, int] = field(default_factory=dict)
    context: list[dict] = field(default_factory=list)
    llm_calls: int = 0
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False)


# --- phases -----------------------------------------------------------------------


def encode_query(q: str, embedder: Embedder, extractor: KeywordExtractor) -> QueryRepr:
    if not q or not q.strip():
        raise ValueError("query must be non-empty")
    return QueryRepr(q, extractor.extract(q), embedder.embed(q))


def _seed_edges(query: QueryRepr, graph: PassageGraph, top_k: int) -> list[tuple[Edge, float]]:
    ranked = edge_index(graph).rank(query, limit=top_k)
    return [(edge_by_key(graph, key), score) for key, score in ranked]


def initial_retrieve(query: QueryRepr, graph: PassageGraph, top_k: int, trace: TraversalTrace | None = None) -> list[str]:
    """Targets of the ``top_k`` best-matching edges, in score order, duplicates kept.

    An edgeless graph falls back to ranking vertices by passage features.
    """
    check_dim(query.embedding, graph.dim)
    if graph.edge_count == 0:
        msg = "graph has no edges; seeding from passage similarity"
        log.warning(msg)
        ranked = vertex_index(graph).rank(query, limit=top_k)
        if trace is not None:
            trace.warnings.append(msg)
            trace.seeds = [{"edge": None, "target": vid, "score": s} for vid, s in ranked]
        return [vid for vid, _ in ranked]
    seeds = _seed_edges(query, graph, top_k)
    if trace is not None:
        trace.seeds = [{"edge": list(e.key), "target": e.target_id, "score": s} for e, s in seeds]
    return [e.target_id for e, _ in seeds]


def reason_step(vertex: Vertex, out_edges: Sequence[Edge], query: QueryRepr, reasoner: Reasoner) -> Edge | None:
    return reasoner.decide(vertex, out_edges, query).edge


def traverse(
    query: QueryRepr,
    graph: PassageGraph,
    params: TraversalParams,
    reasoner: Reasoner | None = None,
    trace: TraversalTrace | None = None,
) -> tuple[Counter, TraversalTrace]:
    if params.reasoner_mode is ReasonerMode.SIMILARITY:
        reasoner = Reasoner.similarity()
    elif reasoner is None:
        raise ValueError("LLM reasoner mode requires a reasoner")
    if trace is None:
        trace = TraversalTrace(query.raw, params.top_k, params.n_hop, reasoner.mode.value)

    seeds = initial_retrieve(query, graph, params.top_k, trace)
    counter: Counter = Counter(seeds)
    frontier = list(counter)

    for round_no in range(1, params.n_hop + 1):
        if not frontier:
            break
        trace.rounds.append(list(frontier))

        def step(vid: str) -> Decision:
            return reasoner.decide(graph.vertices[vid], graph.out_edges(vid), query)

        if params.workers > 1 and len(frontier) > 1:
            with ThreadPoolExecutor(max_workers=params.workers) as pool:
                decisions = list(pool.map(step, frontier))
        else:
            decisions = [step(vid) for vid in frontier]

        next_frontier = []
        for vid, d in zip(frontier, decisions):
            trace.llm_calls += int(d.llm_called)
            target = d.edge.target_id if d.edge is not None else None
            trace.hops.append(
                {
                    "round": round_no,
                    "from": vid,
                    "candidates": [[list(e.key), e.question] for e in graph.out_edges(vid)],
                    "chosen": list(d.edge.key) if d.edge is not None else None,
                    "to": target,
                    "verdict": d.verdict,
                    "response": d.response,
                }
            )
            if target is None:
                continue
            if target not in counter:
                counter[target] = 1
                next_frontier.append(target)
            else:
                counter[target] += 1
        frontier = next_frontier

    trace.counter = dict(counter)
    return counter, trace


@dataclass
class ContextItem:
    passage: Passage
    similarity: float
    importance: float
    helpfulness: float


def rank_helpfulness(counter: Counter, query: QueryRepr, graph: PassageGraph) -> list[ContextItem]:
    items = []
    for vid in counter:
        v = graph.vertices[vid]
        items.append(
            ContextItem(
                passage=v.passage,
                similarity=hybrid_sim(v.features, query),
                importance=importance(counter, vid),
                helpfulness=helpfulness(v, query, counter),
            )
        )
    items.sort(key=lambda it: (-it.helpfulness, it.passage.id))
    return items


def prune(counter: Counter, query: QueryRepr, graph: PassageGraph, top_k: int) -> list[Passage]:
    """The ``top_k`` counted passages by descending helpfulness, ties by id."""
    if not counter:
        raise ValueError("cannot prune an empty counter")
    return [it.passage for it in rank_helpfulness(counter, query, graph)[:top_k]]


def retrieve(
    q: str,
    graph: PassageGraph,
    params: TraversalParams,
    reasoner: Reasoner | None = None,
    *,
    embedder: Embedder,
    extractor: KeywordExtractor,
) -> tuple[list[Passage], TraversalTrace]:
    query = encode_query(q, embedder, extractor)
    counter, trace = traverse(query, graph, params, reasoner)
    if not counter:
        return [], trace
    ranked = rank_helpfulness(counter, query, graph)[: params.top_k]
    trace.context = [
        {"id": it.passage.id, "sim": it.similarity, "imp": it.importance, "h": it.helpfulness} for it in ranked
    ]
    return [it.passage for it in ranked], trace
