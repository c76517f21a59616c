"""
Deterministic offline backend used by tests and mock runs.

Explainer: "concept: " + the highest-scoring evidence tokens.
Sentence generator: activating sentences embed the description's first content
word, neutral sentences come from a fixed pool that never contains it.
Judge: scores each set by keyword overlap with the description and answers the
best set, lowest number on ties.
"""

import logging
import re
import threading

import numpy as np

from featdesc.agents.prompts import ACTIVATING_TAG, EVIDENCE_HEADER, NEUTRAL_TAG
from featdesc.agents.schemas import ChatRequest
from featdesc.models.config import RoleClass

logger = logging.getLogger(__name__)

STOPWORDS = {
    "a", "about", "an", "and", "are", "as", "concept", "concepts", "feature", "for", "in", "is", "it",
    "mention", "mentions", "of", "on", "or", "reference", "references", "related", "that", "the",
    "this", "to", "token", "tokens", "with", "word", "words",
}

ACTIVATING_FRAMES = [
    "the {w} was right here.",
    "i saw a {w} today.",
    "we talked about the {w} again.",
    "this {w} is on my mind.",
    "look at that {w} over there.",
    "she wrote a note about the {w}.",
    "my friend likes the {w} a lot.",
    "there is a {w} near the door.",
]

NEUTRAL_POOL = [
    "she opened the window before breakfast.",
    "we walked along the river in the evening.",
    "he fixed the old bike on sunday.",
    "a glass of water sits on the table.",
    "my friend plays the piano every morning.",
    "rain fell on the roof all night.",
    "they painted the fence blue.",
    "i left my keys in the kitchen.",
    "the bus was late again today.",
    "our garden has roses and tulips.",
    "he wrote his name on the form.",
    "she drinks tea with lemon.",
    "the shop closes at 9 on monday.",
    "we bought bread and milk.",
    "the lamp in the hall is broken.",
    "he likes to run by the lake.",
]

_WORD_RE = re.compile(r"[a-z0-9]+")
_DESCRIPTION_RE = re.compile(r"^Description:\s*(.*)$", re.MULTILINE)
_N_RE = re.compile(r"sentences per set:\s*(\d+)", re.IGNORECASE)
_SET_RE = re.compile(r"^Set (\d+):\s*$", re.MULTILINE)


def content_words(text: str) -> list[str]:
    return [w for w in _WORD_RE.findall(text.lower()) if w not in STOPWORDS]


def first_content_word(text: str) -> str:
    words = content_words(text) or _WORD_RE.findall(text.lower())
    return words[0] if words else "nothing"


def _user_text(request: ChatRequest) -> str:
    return next(m.content for m in request.messages if m.role == "user")


def _ranked_tokens(section: str) -> list[str]:
    best: dict[str, float] = {}
    for line in section.splitlines():
        if "\t" not in line or line.startswith("#"):
            continue
        token, _, score = line.rpartition("\t")
        token = token.strip().lower()
        if not token.isalnum():
            continue
        value = float(score)
        if token not in best or value > best[token]:
            best[token] = value
    order = {t: i for i, t in enumerate(best)}
    return sorted(best, key=lambda t: (-best[t], order[t]))


def explain(request: ChatRequest) -> str:
    text = _user_text(request)
    sections = [s for s in text.split(EVIDENCE_HEADER)[1:] if s.strip()]
    per_section = 3 if len(sections) <= 1 else 2
    picked: list[str] = []
    for section in sections:
        for token in _ranked_tokens(section)[:per_section]:
            if token not in picked:
                picked.append(token)
    return "concept: " + (", ".join(picked) if picked else "unknown")


def generate_sentences(request: ChatRequest) -> str:
    text = _user_text(request)
    description_match = _DESCRIPTION_RE.search(text)
    description = description_match.group(1) if description_match else text
    n_match = _N_RE.search(text)
    n = int(n_match.group(1)) if n_match else 5
    word = first_content_word(description)
    activating = [ACTIVATING_FRAMES[i % len(ACTIVATING_FRAMES)].format(w=word) for i in range(n)]
    pool = [s for s in NEUTRAL_POOL if word not in s] or NEUTRAL_POOL
    neutral = [pool[i % len(pool)] for i in range(n)]
    lines = [ACTIVATING_TAG, *(f"{i}. {s}" for i, s in enumerate(activating, 1))]
    lines += [NEUTRAL_TAG, *(f"{i}. {s}" for i, s in enumerate(neutral, 1))]
    return "\n".join(lines)


def parse_sets(text: str) -> list[list[str]]:
    parts = _SET_RE.split(text)
    sets = []
    for body in parts[2::2]:
        texts = [line.strip()[2:].strip('"') for line in body.splitlines() if line.strip().startswith("- ")]
        sets.append(texts)
    return sets


def overlap_scores(description: str, sets: list[list[str]]) -> list[int]:
    words = content_words(description)
    keywords = [w for w in words if len(w) >= 3] or words
    return [sum(t.lower().count(k) for t in texts for k in keywords) for texts in sets]


def judge(request: ChatRequest, mode: str = "overlap") -> str:
    if mode == "random":
        rng = np.random.default_rng(int(request.prompt_hash[:16], 16))
        return str(int(rng.integers(1, 4)))
    text = _user_text(request)
    description_match = _DESCRIPTION_RE.search(text)
    description = description_match.group(1) if description_match else ""
    scores = overlap_scores(description, parse_sets(text))
    if not scores:
        return "1"
    return str(int(np.argmax(scores)) + 1)


class MockBackend:
    """Answers every role locally; `calls` counts requests that reached it."""

    transport = "mock"

    def __init__(self, judge_mode: str = "overlap"):
        self.judge_mode = judge_mode
        self.calls = 0
        self._lock = threading.Lock()

    def model_name(self, role: RoleClass) -> str:
        return f"mock-{role.value}"

    def send(self, request: ChatRequest) -> str:
        with self._lock:
            self.calls += 1
        if request.role_class is RoleClass.EXPLAINER:
            return explain(request)
        if request.role_class is RoleClass.SENTENCE_GENERATOR:
            return generate_sentences(request)
        return judge(request, self.judge_mode)
