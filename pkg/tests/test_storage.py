from __future__ import annotations

import random
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphgen import FIXTURES, edge, graph_of, query, random_graph, random_query, rand_features, vertex
from passagehop import storage
from passagehop.core import DimensionError, Embedding, Features, hybrid_sim
from passagehop.indexer import IndexConfig, build_graph, load_corpus
from passagehop.providers import HashEmbedder, RuleKeywordExtractor, ScriptedChat
from passagehop.storage import ArchiveError, ChecksumError, HybridIndex, VersionError


def _fixture_graph():
    corpus = [p for p in load_corpus(FIXTURES / "corpus.jsonl") if p.id in {"p05", "p06", "p08"}]
    graph, _ = build_graph(
        corpus,
        IndexConfig(),
        chat=ScriptedChat.from_file(FIXTURES / "script.json"),
        embedder=HashEmbedder(64),
        extractor=RuleKeywordExtractor(),
    )
    return graph


# --- archive ---------------------------------------------------------------------------


def test_round_trip_preserves_fingerprint(tmp_path):
    graph = _fixture_graph()
    path = storage.save(graph, tmp_path / "g.psg", metadata={"note": "x"})
    loaded = storage.load(path)
    assert storage.fingerprint(loaded) == storage.fingerprint(graph)
    assert loaded.candidates == graph.candidates
    assert loaded.edge_cap == graph.edge_cap
    assert storage.load_metadata(path) == {"note": "x"}


@pytest.mark.parametrize("seed", range(10))
def test_round_trip_random_graphs(tmp_path, seed):
    graph = random_graph(random.Random(seed), 1 + seed * 2)
    path = storage.save(graph, tmp_path / "g.psg")
    assert storage.fingerprint(storage.load(path)) == storage.fingerprint(graph)


def test_truncated_archive_is_rejected(tmp_path):
    path = storage.save(_fixture_graph(), tmp_path / "g.psg")
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(ChecksumError):
        storage.load(path)
    path.write_bytes(data[:20])
    with pytest.raises(ChecksumError):
        storage.load(path)


def test_flipped_byte_is_rejected(tmp_path):
    path = storage.save(_fixture_graph(), tmp_path / "g.psg")
    data = bytearray(path.read_bytes())
    data[-3] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(ChecksumError):
        storage.load(path)


def test_version_bump_names_both_versions(tmp_path):
    path = storage.save(_fixture_graph(), tmp_path / "g.psg")
    data = bytearray(path.read_bytes())
    struct.pack_into("<H", data, 8, storage.FORMAT_VERSION + 1)
    path.write_bytes(bytes(data))
    with pytest.raises(VersionError) as info:
        storage.load(path)
    assert str(storage.FORMAT_VERSION + 1) in str(info.value) and str(storage.FORMAT_VERSION) in str(info.value)


def test_not_an_archive(tmp_path):
    path = tmp_path / "g.psg"
    path.write_bytes(b"x" * 100)
    with pytest.raises(ArchiveError):
        storage.load(path)


def test_save_is_atomic_over_existing_file(tmp_path, monkeypatch):
    graph = _fixture_graph()
    path = storage.save(graph, tmp_path / "g.psg")
    before = path.read_bytes()

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(storage.os, "replace", boom)
    with pytest.raises(OSError):
        storage.save(graph_of([vertex("solo")]), path)
    assert path.read_bytes() == before
    assert [p.name for p in tmp_path.iterdir()] == ["g.psg"]


def test_fingerprint_ignores_insertion_order():
    a, b = vertex("a"), vertex("b")
    g1 = graph_of([a, b], [edge("a", "b"), edge("b", "a")])
    g2 = graph_of([b, a], [edge("b", "a"), edge("a", "b")])
    assert storage.fingerprint(g1) == storage.fingerprint(g2)
    g3 = graph_of([a, b], [edge("a", "b", score=0.5000000001), edge("b", "a")])
    assert storage.fingerprint(g3) != storage.fingerprint(g1)


# --- hybrid index --------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_indexed_ranking_equals_brute_force(seed):
    graph = random_graph(random.Random(seed), 20, max_out=5)
    edges = graph.all_edges()[:50]
    graph.set_edges(edges)
    q = random_query(random.Random(1000 + seed))
    got = storage.edge_index(graph).rank(q)
    brute = sorted(((e.key, hybrid_sim(q, e)) for e in edges), key=lambda kv: (-kv[1], kv[0]))
    assert got == brute


def test_no_keyword_overlap_ranks_by_cosine():
    g = graph_of(
        [vertex("a"), vertex("b"), vertex("c")],
        [edge("a", "b", kw={"x"}, vec=(1.0, 0.0)), edge("b", "c", kw={"y"}, vec=(1.0, 1.0)), edge("c", "a", kw={"z"}, vec=(0.0, 1.0))],
    )
    ranked = storage.edge_index(g).rank(query({"nothing"}, (0.0, 1.0)))
    assert [k for k, _ in ranked] == [("c", "a", 0), ("b", "c", 0), ("a", "b", 0)]
    assert ranked[0][1] == 0.5


def test_empty_graph_ranks_nothing():
    g = graph_of([])
    assert storage.edge_index(g).rank(query()) == []
    assert storage.stats(g).avg_out_degree == 0.0


def test_query_dimension_is_checked():
    g = graph_of([vertex("a"), vertex("b")], [edge("a", "b")])
    with pytest.raises(DimensionError):
        storage.edge_index(g).rank(query(vec=(1.0, 0.0, 0.0)))


def test_prefilter_is_exact_without_keywords():
    rng = np.random.default_rng(7)
    rows = [Features(frozenset(), Embedding(rng.normal(size=8))) for _ in range(300)]
    index = HybridIndex(list(range(300)), rows, 8)
    q = Features(frozenset(), Embedding(rng.normal(size=8)))
    assert index.rank(q, limit=10, prefilter=64) == index.rank(q, limit=10)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_vectorised_scores_are_bit_identical(seed):
    rng = random.Random(seed)
    feats = [Features(*map_features(rand_features(rng, 5))) for _ in range(12)]
    q = Features(*map_features(rand_features(rng, 5)))
    index = HybridIndex(list(range(12)), feats, 5)
    assert list(index.scores(q)) == [hybrid_sim(q, f) for f in feats]


def map_features(kv):
    kw, vec = kv
    return frozenset(kw), Embedding(vec)


# --- statistics ------------------------------------------------------------------------------


def test_stats_four_vertices_six_edges():
    vs = [vertex(x) for x in "abcd"]
    es = [edge("a", "b"), edge("a", "c"), edge("b", "c"), edge("c", "d"), edge("d", "a"), edge("d", "b")]
    s = storage.stats(graph_of(vs, es))
    assert (s.vertex_count, s.edge_count, s.avg_out_degree) == (4, 6, 1.5)
    assert s.avg_passage_length == len("passage a")
