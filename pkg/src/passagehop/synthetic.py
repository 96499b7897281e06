"""Generated fact-chain corpus for offline multi-hop checks.

Every chain links four invented entities A, B, C, D across passages:

    head   "A is a partner of B."      (answers questions about A's partner)
    mid    "B was born in C, the birthplace of B."
    tail   "C is famous for D and well known for it."
    coda   "D is located in E."        (continues the chain; not supporting)

plus a distractor that mentions A and only points at the head. The query
"What is the birthplace of the partner of A known for?" shares words with the
distractor's questions but not with any mid or tail question, so ranking
edges against the query seeds only chain heads; the mid and tail are reachable
only by following edges, and their texts (not their questions) echo the query
so pruning can keep them. Supporting passages are head, mid and tail.

The question lists for every passage are scripted, keyed by the fingerprint of
the rendered default prompts, so indexing needs no model.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from passagehop import prompts
from passagehop.core import Passage
from passagehop.evalkit import Dataset, QAExample
from passagehop.providers import ScriptedChat, fingerprint

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"]
_VOWELS = ["a", "e", "i", "o", "u"]


def _word(rng: random.Random, syllables: int = 3) -> str:
    return "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(syllables)).capitalize()


@dataclass
class ChainCorpus:
    passages: list[Passage]
    dataset: Dataset
    script: dict[str, str] = field(repr=False)

    def chat(self) -> ScriptedChat:
        return ScriptedChat(self.script, name="synthetic-script")

    def write(self, outdir: str | Path) -> dict[str, Path]:
        """Write ``corpus.jsonl``, ``dataset.json`` and ``script.json`` into ``outdir``."""
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"corpus": out / "corpus.jsonl", "dataset": out / "dataset.json", "script": out / "script.json"}
        with paths["corpus"].open("w", encoding="utf-8") as fh:
            for p in self.passages:
                fh.write(json.dumps({"id": p.id, "text": p.text, "doc_id": p.doc_id}) + "\n")
        dataset = {
            "examples": [
                {"id": ex.id, "question": ex.question, "answers": list(ex.answers), "supporting_ids": list(ex.supporting_ids)}
                for ex in self.dataset.examples
            ],
            "passages": [{"id": p.id, "text": p.text, "doc_id": p.doc_id} for p in self.passages],
        }
        paths["dataset"].write_text(json.dumps(dataset, indent=2) + "\n", encoding="utf-8")
        paths["script"].write_text(json.dumps({"responses": self.script}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return paths


def _lines(questions: list[str]) -> str:
    return "\n".join(f"{i}. {q}" for i, q in enumerate(questions, 1))


def chain_corpus(n_chains: int = 50, seed: int = 0) -> ChainCorpus:
    rng = random.Random(seed)
    used: set[str] = set()

    def fresh() -> str:
        while True:
            w = _word(rng)
            if w.lower() not in used:
                used.add(w.lower())
                return w

    in_tpl, out_tpl = prompts.load(prompts.IN_COMING), prompts.load(prompts.OUT_COMING)
    passages: list[Passage] = []
    script: dict[str, str] = {}
    examples: list[QAExample] = []

    def add(pid: str, doc: str, text: str, ins: list[str], outs: list[str]) -> None:
        passages.append(Passage(pid, text, doc))
        script[fingerprint(prompts.render(in_tpl, passage=text))] = _lines(ins)
        script[fingerprint(prompts.render(out_tpl, passage=text))] = _lines(outs)

    width = len(str(n_chains - 1))
    for i in range(n_chains):
        a, b, c, d, e = (fresh() for _ in range(5))
        doc = f"chain{i:0{width}d}"
        head, mid, tail = f"{doc}-1-head", f"{doc}-2-mid", f"{doc}-3-tail"
        add(
            head, doc, f"{a} is a partner of {b}.",
            [f"Who is the partner of {a}?", f"Who is {b} a partner of?"],
            [f"Where was {b} born?", f"In which place was {b} born?", f"What is the hometown of {b}?",
             f"Where is the hometown of {b}?"],
        )
        add(
            mid, doc, f"{b} was born in {c}, the birthplace of {b}.",
            [f"Where was {b} born?", f"What is the hometown of {b}?"],
            [f"What is {c} famous for?", f"Why is {c} famous?", f"What makes {c} famous?",
             f"For what is {c} famous?"],
        )
        add(
            tail, doc, f"{c} is famous for {d} and well known for it.",
            [f"What is {c} famous for?", f"Why is {c} famous?"],
            [f"Where is {d} located?", f"Where can {d} be found?", f"In which place is {d} located?",
             f"Where is {d} found?"],
        )
        add(
            f"{doc}-4-coda", doc, f"{d} is located in {e}.",
            [f"Where is {d} located?", f"Where can {d} be found?"],
            [f"What is {e}?", f"Where is {e}?", f"Which country contains {e}?", f"How large is {e}?"],
        )
        add(
            f"{doc}-5-distractor", f"{doc}-registry", f"{a} is listed in a local partner registry.",
            [f"Which registry lists {a}?", f"Where is {a} listed?"],
            [f"Who is the partner of {a}?", f"Which person is the partner of {a}?",
             f"Who is the business partner of {a}?", f"Who became the partner of {a}?"],
        )
        examples.append(
            QAExample(
                id=doc,
                question=f"What is the birthplace of the partner of {a} known for?",
                answers=(d,),
                supporting_ids=(head, mid, tail),
            )
        )
    return ChainCorpus(passages, Dataset(examples, list(passages)), script)
