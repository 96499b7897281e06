"""Default prompt templates and a placeholder renderer.

Templates use ``{name}`` placeholders. Rendering is plain substitution, so
braces elsewhere in a passage or template are left untouched.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

IN_COMING = "in_coming"
OUT_COMING = "out_coming"
REASONING = "reasoning"
ANSWER = "answer"


def load(name: str) -> str:
    return resources.files(__name__).joinpath(f"{name}.txt").read_text(encoding="utf-8")


def load_path(path: str | Path | None, default: str) -> str:
    """Read a template file, or the packaged ``default`` when ``path`` is None."""
    if path is None:
        return load(default)
    return Path(path).read_text(encoding="utf-8")


def render(template: str, **fields: str) -> str:
    out = template
    for key, value in fields.items():
        out = out.replace("{" + key + "}", value)
    return out
