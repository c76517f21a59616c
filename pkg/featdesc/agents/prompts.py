import hashlib
import logging
import re
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

from langchain_core.prompts import ChatPromptTemplate

from featdesc.agents.schemas import ChatMessage
from featdesc.exceptions import ConfigError, ParseError
from featdesc.models.descriptions import BaseMethod, Evidence, RenderedRecord, TokenScore

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).parent / "templates"

EXPLAINER_TEMPLATES = {
    BaseMethod.MAXACT: "explainer_maxact",
    BaseMethod.VOCABPROJ: "explainer_vocabproj",
    BaseMethod.TOKENCHANGE: "explainer_tokenchange",
}
ENSEMBLE_TEMPLATE = "explainer_ensemble"
SENTENCE_TEMPLATE = "sentence_generator"
JUDGE_TEMPLATE = "judge"

EVIDENCE_HEADER = "## Evidence: "
ACTIVATING_TAG = "[ACTIVATING]"
NEUTRAL_TAG = "[NEUTRAL]"

_SECTION_RE = re.compile(r"^### (system|user)\s*$", re.MULTILINE)
_NUMBERED_RE = re.compile(r"^\s*(?:\d+[.)]|[-*])\s*")
_CHOICE_RE = re.compile(r"\b([123])\b")


def _parse_template(text: str, name: str) -> list[tuple[str, str]]:
    parts = _SECTION_RE.split(text)
    messages = [(role, body.strip("\n")) for role, body in zip(parts[1::2], parts[2::2])]
    if not messages:
        raise ConfigError(f"Template '{name}' has no '### system' or '### user' sections")
    return messages


class PromptLibrary:
    """Versioned text templates rendered through langchain's ChatPromptTemplate."""

    def __init__(self, template_dir: Optional[Path] = None):
        self.template_dir = Path(template_dir) if template_dir else TEMPLATE_DIR

    @lru_cache(maxsize=None)
    def _source(self, name: str) -> str:
        path = self.template_dir / f"{name}.txt"
        if not path.exists():
            raise ConfigError(f"Prompt template {path} does not exist")
        return path.read_text(encoding="utf-8")

    @lru_cache(maxsize=None)
    def template(self, name: str) -> ChatPromptTemplate:
        return ChatPromptTemplate.from_messages(_parse_template(self._source(name), name))

    def version(self, name: str) -> str:
        return hashlib.sha256(self._source(name).encode("utf-8")).hexdigest()[:12]

    def versions(self) -> dict[str, str]:
        names = [*EXPLAINER_TEMPLATES.values(), ENSEMBLE_TEMPLATE, SENTENCE_TEMPLATE, JUDGE_TEMPLATE]
        return {name: self.version(name) for name in names}

    def render(self, name: str, **variables) -> list[ChatMessage]:
        rendered = self.template(name).format_messages(**variables)
        return [ChatMessage(role="system" if m.type == "system" else "user", content=m.content) for m in rendered]


# ── evidence rendering ──────────────────────────────────────────────────────────

def _cell(token: str) -> str:
    return token.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def _render_scores(title: str, scores: Sequence[TokenScore]) -> list[str]:
    return [f"### {title}", *(f"{_cell(s.token_text)}\t{s.score:.4f}" for s in scores)]


def _render_records(title: str, records: Sequence[RenderedRecord]) -> list[str]:
    lines = [f"### {title}"]
    for record in records:
        lines.append("<start>")
        lines.extend(f"{_cell(t)}\t{a:.4f}" for t, a in zip(record.tokens, record.activations))
        lines.append("<end>")
    return lines


def render_evidence(evidence: Evidence) -> str:
    lines = [f"{EVIDENCE_HEADER}{evidence.method.value}"]
    if evidence.method is BaseMethod.MAXACT:
        lines += _render_records("top activating records", evidence.records)
        if evidence.quantile_records:
            lines += _render_records("records from lower activation quantiles", evidence.quantile_records)
    else:
        lines += _render_scores("promoted", evidence.promoted)
        lines += _render_scores("suppressed", evidence.suppressed)
    return "\n".join(lines)


def render_evidence_sections(evidence: Sequence[Evidence]) -> str:
    """Sections in canonical method order so member order never changes the prompt."""
    ordered = sorted(evidence, key=lambda e: e.method.rank)
    return "\n\n".join(render_evidence(e) for e in ordered)


def render_sets(texts_per_set: Sequence[Sequence[str]]) -> str:
    blocks = []
    for i, texts in enumerate(texts_per_set, start=1):
        quoted = "\n".join(f'- "{t}"' for t in texts)
        blocks.append(f"Set {i}:\n{quoted}")
    return "\n\n".join(blocks)


# ── response parsing ────────────────────────────────────────────────────────────

def _numbered_lines(block: str) -> list[str]:
    sentences = []
    for line in block.splitlines():
        line = _NUMBERED_RE.sub("", line).strip()
        if line:
            sentences.append(line)
    return sentences


def parse_sentence_sets(text: str, n: int, require_neutral: bool = True) -> tuple[list[str], list[str]]:
    """
    Reads the activating and neutral blocks. Evaluation needs exactly `n` of
    each; with `require_neutral=False` the neutral block may be missing or
    short and any non-empty activating block is kept, cut to `n`.
    """
    if ACTIVATING_TAG not in text:
        raise ParseError(f"expected an {ACTIVATING_TAG} section")
    if require_neutral and NEUTRAL_TAG not in text:
        raise ParseError(f"expected {ACTIVATING_TAG} and {NEUTRAL_TAG} sections")
    after = text.split(ACTIVATING_TAG, 1)[1]
    activating_block, _, neutral_block = after.partition(NEUTRAL_TAG)
    activating = _numbered_lines(activating_block)
    neutral = _numbered_lines(neutral_block)
    if not require_neutral:
        if not activating:
            raise ParseError("no activating sentences")
        return activating[:n], neutral[:n]
    if len(activating) != n or len(neutral) != n:
        raise ParseError(f"expected {n} sentences per set, got {len(activating)} activating and {len(neutral)} neutral")
    return activating, neutral


def parse_judge_choice(text: str) -> int:
    match = _CHOICE_RE.search(text)
    if not match:
        raise ParseError(f"no set number 1-3 in judge answer {text[:80]!r}")
    return int(match.group(1))
