"""Answer and retrieval metrics, dataset loading, and the experiment runner."""

from __future__ import annotations

import hashlib
import json
import logging
import re
import string
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from passagehop import prompts
from passagehop.core import Passage, PassageGraph
from passagehop.providers import ChatModel, Embedder, KeywordExtractor, ProviderError
from passagehop.traversal import Reasoner, TraversalParams, retrieve

log = logging.getLogger(__name__)

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = str.maketrans("", "", string.punctuation)


class EvalInputError(ValueError):
    pass


# --- metrics ------------------------------------------------------------------


def normalize_answer(s: str) -> str:
    """Lowercase, drop punctuation and English articles, collapse whitespace."""
    s = s.lower().translate(_PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def exact_match(prediction: str, golds: Iterable[str]) -> int:
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(g) for g in golds))


def _token_f1(prediction: str, gold: str) -> float:
    pred = normalize_answer(prediction).split()
    ref = normalize_answer(gold).split()
    common = sum((Counter(pred) & Counter(ref)).values())
    if common == 0:
        return 0.0
    precision = common / len(pred)
    recall = common / len(ref)
    return 2 * precision * recall / (precision + recall)


def answer_f1(prediction: str, golds: Iterable[str]) -> float:
    """Best token-overlap F1 against any gold answer."""
    return max((_token_f1(prediction, g) for g in golds), default=0.0)


def retrieval_prf(retrieved: Iterable[str], relevant: Iterable[str]) -> tuple[float, float, float]:
    ret, rel = set(retrieved), set(relevant)
    if not rel:
        raise EvalInputError("relevant set is empty")
    hit = len(ret & rel)
    p = hit / len(ret) if ret else 0.0
    r = hit / len(rel)
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


# --- datasets --------------------------------------------------------------------


@dataclass(frozen=True)
class QAExample:
    id: str
    question: str
    answers: tuple[str, ...]
    supporting_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.answers:
            raise EvalInputError(f"example {self.id!r} has no gold answer")


@dataclass
class Dataset:
    examples: list[QAExample]
    passages: list[Passage] = field(default_factory=list)

    def validate(self, graph: PassageGraph | None = None) -> None:
        known = set(graph.vertices) if graph is not None else {p.id for p in self.passages}
        for ex in self.examples:
            missing = [s for s in ex.supporting_ids if s not in known]
            if missing:
                raise EvalInputError(f"example {ex.id!r}: unknown supporting ids {missing[:3]}")


def _read_records(path: Path) -> list | dict:
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".jsonl":
        return [json.loads(line) for line in text.splitlines() if line.strip()]
    return json.loads(text)


def _answers(rec: dict) -> tuple[str, ...]:
    if "answers" in rec:
        raw = rec["answers"]
        return tuple(raw) if isinstance(raw, list) else (str(raw),)
    out = [str(rec["answer"])]
    out.extend(rec.get("answer_aliases", []))
    return tuple(out)


def _hotpot(records: list[dict]) -> Dataset:
    # one passage per sentence, the unit of supporting facts in these datasets
    passages: dict[str, Passage] = {}
    examples = []
    for rec in records:
        for title, sentences in rec["context"]:
            for i, sent in enumerate(sentences):
                pid = f"{title}#{i}"
                if pid not in passages and sent.strip():
                    passages[pid] = Passage(pid, sent.strip(), title)
        support = tuple(dict.fromkeys(f"{t}#{i}" for t, i in rec["supporting_facts"]))
        examples.append(QAExample(str(rec.get("_id", rec.get("id"))), rec["question"], _answers(rec), support))
    return Dataset(examples, list(passages.values()))


def _musique(records: list[dict]) -> Dataset:
    passages: dict[str, Passage] = {}
    examples = []
    for rec in records:
        support = []
        for para in rec["paragraphs"]:
            title, text = para.get("title", ""), para["paragraph_text"]
            pid = "p" + hashlib.sha1(f"{title}\n{text}".encode()).hexdigest()[:12]
            passages.setdefault(pid, Passage(pid, text, title))
            if para.get("is_supporting"):
                support.append(pid)
        examples.append(QAExample(str(rec["id"]), rec["question"], _answers(rec), tuple(support)))
    return Dataset(examples, list(passages.values()))


def load_dataset(path: str | Path) -> Dataset:
    """Load a QA dataset.

    Accepted layouts:

    * generic: ``{"examples": [{"id", "question", "answers", "supporting_ids"}],
      "passages": [{"id", "text", "doc_id"}]}`` (or a bare list of examples);
    * HotpotQA / 2WikiMultiHopQA: records with ``context`` and
      ``supporting_facts``; passages are sentences with id ``"{title}#{i}"``;
    * MuSiQue: records with ``paragraphs``; passage ids hash title and text.
    """
    path = Path(path)
    data = _read_records(path)
    if isinstance(data, dict):
        records, passages = data.get("examples", []), data.get("passages", [])
    else:
        records, passages = data, []
    if records and "supporting_facts" in records[0] and "context" in records[0]:
        return _hotpot(records)
    if records and "paragraphs" in records[0]:
        return _musique(records)
    try:
        examples = [
            QAExample(str(r["id"]), r["question"], _answers(r), tuple(str(s) for s in r.get("supporting_ids", [])))
            for r in records
        ]
        pool = [Passage(str(p["id"]), p["text"], str(p.get("doc_id", ""))) for p in passages]
    except (KeyError, TypeError) as exc:
        raise EvalInputError(f"{path}: unrecognized dataset record ({exc})") from exc
    return Dataset(examples, pool)


# --- runner --------------------------------------------------------------------


@dataclass
class ExampleRecord:
    id: str
    retrieved: list[str]
    supporting: list[str]
    precision: float
    recall: float
    f1: float
    llm_calls: int
    prediction: str | None = None
    em: int | None = None
    answer_f1: float | None = None
    error: str | None = None


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values) if values else 0.0


@dataclass
class EvalReport:
    top_k: int
    n_hop: int
    mode: str
    records: list[ExampleRecord]
    generation: bool = False

    @property
    def retrieval_precision(self) -> float:
        return _mean([r.precision for r in self.records])

    @property
    def retrieval_recall(self) -> float:
        return _mean([r.recall for r in self.records])

    @property
    def retrieval_f1(self) -> float:
        return _mean([r.f1 for r in self.records])

    @property
    def answer_em(self) -> float | None:
        return _mean([r.em or 0 for r in self.records]) if self.generation else None

    @property
    def answer_f1(self) -> float | None:
        return _mean([r.answer_f1 or 0.0 for r in self.records]) if self.generation else None

    @property
    def mean_llm_calls(self) -> float:
        return _mean([r.llm_calls for r in self.records])

    @property
    def mean_context_size(self) -> float:
        return _mean([len(r.retrieved) for r in self.records])

    def summary(self) -> dict:
        return {
            "top_k": self.top_k,
            "n_hop": self.n_hop,
            "mode": self.mode,
            "examples": len(self.records),
            "errors": sum(r.error is not None for r in self.records),
            "answer_em": self.answer_em,
            "answer_f1": self.answer_f1,
            "retrieval_precision": self.retrieval_precision,
            "retrieval_recall": self.retrieval_recall,
            "retrieval_f1": self.retrieval_f1,
            "mean_llm_calls": self.mean_llm_calls,
            "mean_context_size": self.mean_context_size,
        }

    def to_dict(self) -> dict:
        return {"summary": self.summary(), "records": [asdict(r) for r in self.records]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _pct(x: float | None) -> str:
    return "-" if x is None else f"{100 * x:.2f}"


def format_table(reports: Sequence[EvalReport]) -> str:
    """Plain-text table with Answer (EM, F1) and Retrieval (P, R, F1, cost) groups."""
    head = (
        f"{'top_k':>5} {'n_hop':>5} {'mode':>10} | {'EM':>6} {'F1':>6} | "
        f"{'P':>6} {'R':>6} {'F1':>6} {'LLM cost':>8} {'ctx':>5}"
    )
    lines = [f"{'':>23}|{'Answer':^15}|{'Retrieval':^38}", head, "-" * len(head)]
    for rep in reports:
        lines.append(
            f"{rep.top_k:>5} {rep.n_hop:>5} {rep.mode:>10} | {_pct(rep.answer_em):>6} {_pct(rep.answer_f1):>6} | "
            f"{_pct(rep.retrieval_precision):>6} {_pct(rep.retrieval_recall):>6} {_pct(rep.retrieval_f1):>6} "
            f"{rep.mean_llm_calls:>8.2f} {rep.mean_context_size:>5.2f}"
        )
    return "\n".join(lines) + "\n"


def generate_answer(question: str, context: Sequence[Passage], generator: ChatModel, template: str | None = None) -> str:
    template = template if template is not None else prompts.load(prompts.ANSWER)
    numbered = "\n".join(f"[{i}] {p.text}" for i, p in enumerate(context, 1))
    reply = generator.chat(prompts.render(template, context=numbered, query=question))
    lines = [ln.strip() for ln in reply.strip().splitlines() if ln.strip()]
    return lines[0] if lines else ""


def run_eval(
    dataset: Dataset,
    graph: PassageGraph,
    params: TraversalParams,
    *,
    embedder: Embedder,
    extractor: KeywordExtractor,
    reasoner: Reasoner | None = None,
    generator: ChatModel | None = None,
    answer_template: str | None = None,
) -> EvalReport:
    """Retrieve for every example, score retrieval, optionally generate and score answers."""
    records = []
    for ex in dataset.examples:
        rec = ExampleRecord(ex.id, [], list(ex.supporting_ids), 0.0, 0.0, 0.0, 0)
        try:
            context, trace = retrieve(ex.question, graph, params, reasoner, embedder=embedder, extractor=extractor)
            rec.retrieved = [p.id for p in context]
            rec.llm_calls = trace.llm_calls
            if ex.supporting_ids:
                rec.precision, rec.recall, rec.f1 = retrieval_prf(rec.retrieved, ex.supporting_ids)
            if generator is not None:
                rec.prediction = generate_answer(ex.question, context, generator, answer_template)
                rec.em = exact_match(rec.prediction, ex.answers)
                rec.answer_f1 = answer_f1(rec.prediction, ex.answers)
        except ProviderError as exc:
            log.warning("example %s failed: %s", ex.id, exc)
            rec.error = str(exc)
        records.append(rec)
    return EvalReport(params.top_k, params.n_hop, params.reasoner_mode.value, records, generation=generator is not None)


def sweep(
    dataset: Dataset,
    graph: PassageGraph,
    top_ks: Sequence[int],
    n_hops: Sequence[int],
    base: TraversalParams,
    **kwargs,
) -> list[EvalReport]:
    reports = []
    for k in top_ks:
        for h in n_hops:
            params = TraversalParams(top_k=k, n_hop=h, reasoner_mode=base.reasoner_mode, workers=base.workers)
            reports.append(run_eval(dataset, graph, params, **kwargs))
    return reports
