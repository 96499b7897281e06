"""Passage-graph retrieval with pseudo-query edges and retrieve-reason-prune traversal."""

from passagehop.core import Edge, Embedding, Passage, PassageGraph, QueryTriplet, Vertex, hybrid_sim
from passagehop.indexer import IndexConfig, add_passage, build_graph
from passagehop.storage import fingerprint, load, save, stats
from passagehop.traversal import Reasoner, ReasonerMode, TraversalParams, retrieve

__version__ = "0.1.0"

__all__ = [
    "Edge",
    "Embedding",
    "IndexConfig",
    "Passage",
    "PassageGraph",
    "QueryTriplet",
    "Reasoner",
    "ReasonerMode",
    "TraversalParams",
    "Vertex",
    "add_passage",
    "build_graph",
    "fingerprint",
    "hybrid_sim",
    "load",
    "retrieve",
    "save",
    "stats",
]
