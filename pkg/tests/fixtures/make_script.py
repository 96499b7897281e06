"""Regenerate script.json from questions.json and the packaged prompt templates.

Run from this directory: ``python3 make_script.py``. The fixture chat answers
every indexing prompt with the hand-written questions, and every other prompt
(reasoning, answer generation) with "1".
"""

from __future__ import annotations

import json
from pathlib import Path

from passagehop import prompts
from passagehop.providers import fingerprint

here = Path(__file__).parent
questions = json.loads((here / "questions.json").read_text())
responses = {}
for line in (here / "corpus.jsonl").read_text().splitlines():
    rec = json.loads(line)
    qs = questions[rec["id"]]
    for template, key in ((prompts.IN_COMING, "in"), (prompts.OUT_COMING, "out")):
        prompt = prompts.render(prompts.load(template), passage=rec["text"])
        responses[fingerprint(prompt)] = "\n".join(f"{i}. {q}" for i, q in enumerate(qs[key], 1))
(here / "script.json").write_text(json.dumps({"responses": responses, "default": "1"}, indent=2, sort_keys=True) + "\n")
