"""Prompt template registry and class-definition extraction.

Templates live as UTF-8 text files next to this module, one per template id.
Slots use ``{name}``; literal braces are doubled, as in :meth:`str.format`.
"""

from __future__ import annotations

import ast
import json
import re
import string
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Sequence

TEMPLATE_DIR = Path(__file__).with_name("templates")

TEMPLATE_IDS = (
    "system",
    "multi-class-detect",
    "single-class-detect",
    "detect-with-instructions",
    "init-summarize",
    "refine-contrastive",
    "refine-exclude-fp",
    "refine-include-fn",
    "generate-alternative",
    "detpo-detect",
    "vqa-score",
)

# template id -> (clause start, slot): clause dropped when the slot is blank
_OPTIONAL_CLAUSES = {
    "detect-with-instructions": ("\n\nUse the following annotator instructions", "instructions"),
}


class PromptError(ValueError):
    pass


class UnknownTemplateError(PromptError, KeyError):
    pass


class MissingSlotError(PromptError):
    pass


class ExtractionError(PromptError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    text: str

    @property
    def slots(self) -> frozenset[str]:
        return frozenset(name for _, name, _, _ in string.Formatter().parse(self.text) if name)

    def render(self, slots: Mapping[str, str]) -> str:
        text = self.text
        clause = _OPTIONAL_CLAUSES.get(self.template_id)
        if clause and not str(slots.get(clause[1], "")).strip():
            text = text[: text.index(clause[0])]
        needed = {name for _, name, _, _ in string.Formatter().parse(text) if name}
        missing = sorted(needed - set(slots))
        if missing:
            raise MissingSlotError(f"template {self.template_id!r} needs slot(s) {', '.join(missing)}")
        return text.format_map({k: str(v) for k, v in slots.items()})


class TemplateRegistry:
    def __init__(self, directory: str | Path = TEMPLATE_DIR):
        self.directory = Path(directory)
        self._templates: dict[str, PromptTemplate] = {}
        for path in sorted(self.directory.glob("*.txt")):
            text = path.read_text(encoding="utf-8")
            if text.endswith("\n"):
                text = text[:-1]
            self._templates[path.stem] = PromptTemplate(path.stem, text)

    def __contains__(self, template_id: str) -> bool:
        return template_id in self._templates

    def ids(self) -> list[str]:
        return sorted(self._templates)

    def get(self, template_id: str) -> PromptTemplate:
        try:
            return self._templates[template_id]
        except KeyError:
            raise UnknownTemplateError(f"unknown template id {template_id!r}") from None

    def render(self, template_id: str, **slots: str) -> str:
        return self.get(template_id).render(slots)


@lru_cache(maxsize=None)
def default_registry() -> TemplateRegistry:
    return TemplateRegistry()


def render(template_id: str, slots: Mapping[str, str] | None = None, **kw: str) -> str:
    merged = dict(slots or {}, **kw)
    return default_registry().get(template_id).render(merged)


def category_prompt(names: Sequence[str]) -> str:
    """Comma-joined quoted class names for the multi-class prompts."""
    return ", ".join(f'"{n}"' for n in names)


def instruction_block(entries: Sequence[tuple[str, str]]) -> str:
    """``name: description`` lines; classes without text are omitted."""
    return "\n".join(f"{name}: {text.strip()}" for name, text in entries if text and text.strip())


# --- definition extraction -------------------------------------------------

_FENCE = re.compile(r"```[ \t]*([A-Za-z0-9_+-]*)[ \t]*\n?(.*?)```", re.DOTALL)


@dataclass(frozen=True)
class Definition:
    text: str
    quality: str  # "mapping" | "fenced" | "paragraph"

    @property
    def low_confidence(self) -> bool:
        return self.quality != "mapping"


def embed_definition(class_name: str, definition: str) -> str:
    """Format a definition the way the refinement templates ask the model to."""
    return f"```python {{{class_name!r}: {definition!r}}}```"


def _norm(name: str) -> str:
    return " ".join(str(name).split()).casefold()


def _mapping_value(body: str, class_name: str) -> str | None:
    body = body.strip()
    start, end = body.find("{"), body.rfind("}")
    if start < 0 or end <= start:
        return None
    literal = body[start : end + 1]
    parsed = None
    for parse in (ast.literal_eval, json.loads):
        try:
            parsed = parse(literal)
            break
        except (ValueError, SyntaxError, TypeError, MemoryError, RecursionError):
            continue
    if isinstance(parsed, dict) and parsed:
        for key, value in parsed.items():
            if _norm(key) == _norm(class_name) and isinstance(value, str):
                return value
        if len(parsed) == 1:
            (value,) = parsed.values()
            if isinstance(value, str):
                return value
        return None
    # unparseable literal, e.g. unescaped quotes inside the definition
    m = re.match(r"""\{\s*(['"])(.*?)\1\s*:\s*(['"])(.*)\3\s*\}\Z""", literal, re.DOTALL)
    if m and _norm(m.group(2)) == _norm(class_name):
        return m.group(4)
    return None


def extract_definition(text: str, class_name: str) -> Definition:
    """Pull the updated class definition out of a refinement response.

    Preference: the last fenced ``{name: definition}`` mapping, then a bare
    mapping, then the last fenced block, then the last paragraph.
    """
    if not text or not text.strip():
        raise ExtractionError("empty model output")
    blocks = [m.group(2) for m in _FENCE.finditer(text)]
    for body in reversed(blocks):
        value = _mapping_value(body, class_name)
        if value is not None and value.strip():
            return Definition(value.strip(), "mapping")
    unfenced = _FENCE.sub("", text)
    value = _mapping_value(unfenced, class_name)
    if value is not None and value.strip():
        return Definition(value.strip(), "mapping")
    for body in reversed(blocks):
        if body.strip():
            return Definition(body.strip(), "fenced")
    paragraphs = [p.strip() for p in re.split(r"\n\s*\n", text) if p.strip()]
    if not paragraphs:
        raise ExtractionError("no definition found in model output")
    return Definition(paragraphs[-1], "paragraph")
