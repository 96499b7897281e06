from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphgen import FIXTURES, edge, graph_of, oracle_merge, random_vertices, vertex
from passagehop import prompts, storage
from passagehop.core import Direction, Passage, PassageGraph, edge_cap_nlogn
from passagehop.indexer import (
    BuildError,
    IdConflictError,
    IndexConfig,
    SimulationError,
    add_passage,
    build_graph,
    build_triplets,
    cap_edges,
    insert_vertex,
    load_corpus,
    match_candidates,
    merge_edges,
    parse_questions,
    simulate_queries,
)
from passagehop.providers import HashEmbedder, RuleKeywordExtractor, ScriptedChat, fingerprint

ROSE = "Rose is the princess in the story The Frog Prince"


def _by_direction(ins: list[str], outs: list[str]):
    def handler(prompt: str) -> str:
        qs = ins if "answers can be found in the passage itself" in prompt else outs
        return "\n".join(f"{i}. {q}" for i, q in enumerate(qs, 1))

    return ScriptedChat(handler=handler)


# --- query simulation ----------------------------------------------------------------


def test_simulation_keeps_pseudo_queries():
    chat = _by_direction(
        ["What is the name of the princess?", "Which story is Rose the princess in?"],
        [
            "How is the frog connected to Rose?",
            "Why does the princess kiss the frog?",
            "Who wrote The Frog Prince?",
            "What happens at the end of The Frog Prince?",
        ],
    )
    sim = simulate_queries(Passage("rose", ROSE), chat, IndexConfig())
    assert "What is the name of the princess?" in sim.in_questions
    assert "How is the frog connected to Rose?" in sim.out_questions
    # exactly 2 in / 4 out meets the minimums with one call per direction
    assert sim.shortfalls == [] and sim.llm_calls == 2


def test_shortfall_is_reprompted_then_reported():
    replies = iter(["1. Who is Rose?", "1. Who is Rose?\n2. Where is Rose?", "no questions here"])
    chat = ScriptedChat(handler=lambda p: next(replies) if "answers can be found" not in p else "A?\nB?")
    sim = simulate_queries(Passage("rose", ROSE), chat, IndexConfig(question_retries=2))
    assert sim.out_questions == ["Who is Rose?", "Where is Rose?"]
    assert sim.llm_calls == 4
    assert sim.shortfalls == ["2/4 out-coming questions"]


def test_no_questions_is_an_error():
    chat = ScriptedChat(default="I cannot help with that.")
    with pytest.raises(SimulationError):
        simulate_queries(Passage("rose", ROSE), chat, IndexConfig(question_retries=0))


def test_parse_questions_strips_numbering_and_drops_prose():
    text = "1. Who is Rose?\n2) Why?\n- What now?\nHere are more:\nQ4: When?\n\n(5) Where is it?"
    questions, rejected = parse_questions(text)
    assert questions == ["Who is Rose?", "Why?", "What now?", "When?", "Where is it?"]
    assert rejected == ["Here are more:"]


# --- triplets ------------------------------------------------------------------------


def test_build_triplets():
    emb, ext = HashEmbedder(16), RuleKeywordExtractor()
    qs = ["Who is Rose?", "Who is Rose?", "Where is the frog?", "Who is he?"]
    ts = build_triplets(qs, Direction.OUT, emb, ext)
    assert len(ts) == 4 and all(t.direction is Direction.OUT for t in ts)
    assert [t.ordinal for t in ts] == [0, 1, 2, 3]
    assert ts[0].keywords == ts[1].keywords and ts[0].embedding == ts[1].embedding
    assert ts[3].keywords == frozenset()


# --- edge merging --------------------------------------------------------------------


def test_forced_single_edge():
    v1 = vertex("v1", outs=[({"x"}, [1.0, 0.0])])
    v2 = vertex("v2", ins=[({"x"}, [1.0, 0.0])])
    edges = merge_edges([v1, v2])
    assert [(e.source_id, e.target_id) for e in edges] == [("v1", "v2")]
    assert edges[0].sim_score == 1.0


def test_three_vertex_hand_table():
    a = vertex("A", outs=[({"x"}, [1.0, 0.0])], ins=[({"a"}, [0.0, 1.0])])
    b = vertex("B", outs=[({"y"}, [0.0, 1.0])], ins=[({"x"}, [1.0, 0.0]), ({"y"}, [1.0, 1.0])])
    c = vertex("C", outs=[({"x", "y"}, [1.0, 1.0])], ins=[({"y"}, [0.0, 1.0])])
    edges = merge_edges([c, a, b])
    got = [(e.source_id, e.target_id, e.target_ordinal, round(e.sim_score, 12)) for e in edges]
    # A->B: identical features; B->C: identical; C->B.in1: (1/2 + 1)/2
    assert got == [("A", "B", 0, 1.0), ("B", "C", 0, 1.0), ("C", "B", 1, 0.75)]
    assert edges == oracle_merge([a, b, c], None)
    # the edge carries the matched in-coming question and the keyword union
    assert edges[2].question == "B in 1?" and edges[2].keywords == {"x", "y"}


def test_self_match_is_excluded():
    v1 = vertex("v1", outs=[({"x"}, [1.0, 0.0])], ins=[({"x"}, [1.0, 0.0])])
    v2 = vertex("v2", ins=[({"x"}, [0.6, 0.8])])
    v3 = vertex("v3", ins=[({"z"}, [1.0, 0.0])])
    (e,) = merge_edges([v1, v2, v3])
    assert (e.source_id, e.target_id) == ("v1", "v2")
    assert e.sim_score == pytest.approx(0.8, abs=1e-12)


def test_argmax_ties_go_to_smallest_target():
    src = vertex("s", outs=[({"x"}, [1.0, 0.0])])
    later = vertex("t2", ins=[({"x"}, [1.0, 0.0])])
    earlier = vertex("t1", ins=[({"q"}, [0.0, 1.0]), ({"x"}, [1.0, 0.0])])
    (e,) = merge_edges([src, later, earlier])
    assert (e.target_id, e.target_ordinal) == ("t1", 1)


def test_duplicate_matches_are_deduplicated():
    src = vertex("s", outs=[({"x"}, [1.0, 0.0]), ({"x"}, [2.0, 0.0]), ({"y"}, [1.0, 0.0])])
    dst = vertex("t", ins=[({"x"}, [1.0, 0.0])])
    edges = merge_edges([src, dst])
    assert [e.source_ordinal for e in edges] == [0, 2]


def test_cap_keeps_highest_scores():
    scores = [0.9, 0.1, 0.5, 0.7, 0.3, 0.8, 0.2, 0.6, 0.4, 0.95]
    ids = ["a", "b", "c", "d"]
    edges = [edge(ids[i % 4], ids[(i + 1) % 4], score=s, ordinal=i) for i, s in enumerate(scores)]
    cap = edge_cap_nlogn(4)
    assert cap == 8
    kept = cap_edges(edges, cap)
    assert sorted(e.sim_score for e in kept) == sorted(scores)[2:]
    assert cap_edges(edges[:3], cap) == sorted(edges[:3], key=lambda e: e.key)
    assert cap_edges(edges, None) == sorted(edges, key=lambda e: e.key)


def test_cap_ties_by_source_then_target():
    edges = [edge("b", "a", score=0.5), edge("a", "c", score=0.5), edge("a", "b", score=0.5), edge("c", "a", score=0.9)]
    kept = cap_edges(edges, 2)
    assert [e.key for e in kept] == [("a", "b", 0), ("c", "a", 0)]


@pytest.mark.parametrize("seed", range(25))
def test_merge_matches_oracle(seed):
    rng = random.Random(seed)
    vertices = random_vertices(rng, rng.randint(1, 10))
    cap = edge_cap_nlogn(len(vertices))
    assert cap_edges(merge_edges(vertices), cap) == oracle_merge(vertices, cap)


@pytest.mark.parametrize("seed", range(5))
def test_prefilter_with_full_width_equals_exact(seed):
    rng = random.Random(100 + seed)
    vertices = random_vertices(rng, 12, dim=4)
    exact = match_candidates(vertices, 4)
    wide = match_candidates(vertices, 4, exact_limit=0, prefilter_k=1000)
    assert wide == exact


# --- build ------------------------------------------------------------------------------


def _fixture_chat() -> ScriptedChat:
    return ScriptedChat.from_file(FIXTURES / "script.json")


def _build(corpus, **cfg):
    return build_graph(
        corpus, IndexConfig(**cfg), chat=_fixture_chat(), embedder=HashEmbedder(64), extractor=RuleKeywordExtractor()
    )


def test_three_passage_fingerprint_is_golden():
    corpus = [p for p in load_corpus(FIXTURES / "corpus.jsonl") if p.id in {"p05", "p06", "p08"}]
    graph, report = _build(corpus)
    golden = json.loads((FIXTURES / "golden" / "three_passage.json").read_text())
    assert storage.fingerprint(graph) == golden["fingerprint"]
    assert report.edge_count == golden["edge_count"]
    again, _ = _build(corpus)
    assert storage.fingerprint(again) == storage.fingerprint(graph)


def test_build_report_and_stats():
    corpus = load_corpus(FIXTURES / "corpus.jsonl")
    graph, report = _build(corpus)
    assert report.vertex_count == 8 and report.failures == []
    assert report.llm_calls == 16
    assert len(graph.candidates) == 32
    assert graph.edge_count <= edge_cap_nlogn(8)
    st_ = storage.stats(graph)
    assert st_.avg_out_degree == graph.edge_count / 8
    assert all(e.source_id != e.target_id for e in graph.all_edges())


def test_empty_corpus_is_an_error():
    with pytest.raises(BuildError):
        _build([])


def test_duplicate_ids_rejected():
    with pytest.raises(IdConflictError):
        _build([Passage("a", "one text"), Passage("a", "another")])


def test_failed_passage_is_skipped_and_recorded():
    corpus = load_corpus(FIXTURES / "corpus.jsonl")[:3] + [Passage("odd", "A passage nobody scripted.")]
    graph, report = build_graph(
        corpus,
        IndexConfig(),
        chat=ScriptedChat(ScriptedChat.from_file(FIXTURES / "script.json").responses),
        embedder=HashEmbedder(64),
        extractor=RuleKeywordExtractor(),
    )
    assert "odd" not in graph.vertices and len(graph.vertices) == 3
    assert report.failures[0]["passage_id"] == "odd"


def test_single_vertex_graph_warns():
    graph, report = _build(load_corpus(FIXTURES / "corpus.jsonl")[:1])
    assert graph.edge_count == 0 and report.warnings


def test_workers_do_not_change_the_graph():
    corpus = load_corpus(FIXTURES / "corpus.jsonl")
    serial, _ = _build(corpus)
    threaded, _ = _build(corpus, workers=4)
    assert storage.fingerprint(serial) == storage.fingerprint(threaded)


# --- incremental ---------------------------------------------------------------------


def _graph(vertices, dim=2) -> PassageGraph:
    g = graph_of([], dim=dim)
    for v in vertices:
        insert_vertex(g, v, IndexConfig(edge_cap_rule="none"))
    return g


def test_add_passage_creates_new_best_edge():
    old = vertex("a", outs=[({"x"}, [1.0, 0.0])], ins=[({"q"}, [0.0, 1.0])])
    weak = vertex("b", ins=[({"z"}, [0.6, 0.8])])
    g = _graph([old, weak])
    assert [(e.source_id, e.target_id) for e in g.all_edges()] == [("a", "b")]
    insert_vertex(g, vertex("c", ins=[({"x"}, [1.0, 0.0])]), IndexConfig(edge_cap_rule="none"))
    assert ("a", "c") in {(e.source_id, e.target_id) for e in g.all_edges()}
    assert g.all_edges() == oracle_merge(list(g.vertices.values()), None)


def test_unrelated_passage_leaves_scores_unchanged():
    a = vertex("a", outs=[({"x"}, [1.0, 0.0, 0.0])], ins=[({"y"}, [0.0, 1.0, 0.0])], dim=3)
    b = vertex("b", outs=[({"y"}, [0.0, 1.0, 0.0])], ins=[({"x"}, [1.0, 0.0, 0.0])], dim=3)
    g = _graph([a, b], dim=3)
    before = {e.key: e.sim_score for e in g.all_edges()}
    insert_vertex(g, vertex("z", ins=[({"w"}, [0.0, 0.0, 1.0])], dim=3), IndexConfig(edge_cap_rule="none"))
    assert {e.key: e.sim_score for e in g.all_edges()} == before


def test_add_passage_end_to_end_and_duplicate_rejected():
    corpus = load_corpus(FIXTURES / "corpus.jsonl")
    batch, _ = _build(corpus)
    grown, _ = _build(corpus[:-1])
    kwargs = dict(chat=_fixture_chat(), embedder=HashEmbedder(64), extractor=RuleKeywordExtractor())
    add_passage(grown, corpus[-1], IndexConfig(), **kwargs)
    assert storage.fingerprint(grown) == storage.fingerprint(batch)
    with pytest.raises(IdConflictError):
        add_passage(grown, corpus[0], IndexConfig(), **kwargs)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 9))
def test_incremental_equals_batch(seed, n):
    rng = random.Random(seed)
    vertices = random_vertices(rng, n)
    config = IndexConfig()
    batch = graph_of(vertices, dim=3)
    batch.candidates = match_candidates(vertices, 3)
    batch.edge_cap = config.edge_cap(n)
    batch.set_edges(cap_edges(merge_edges(vertices), batch.edge_cap))
    grown = graph_of([], dim=3)
    for v in vertices:
        insert_vertex(grown, v, config)
    assert grown.all_edges() == batch.all_edges()
    assert grown.candidates == batch.candidates


def test_prompts_render_passage():
    text = prompts.render(prompts.load(prompts.OUT_COMING), passage=ROSE)
    assert ROSE in text and "{passage}" not in text
    assert fingerprint(text).startswith("sha256:")
