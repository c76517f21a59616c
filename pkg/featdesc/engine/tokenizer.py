import json
import logging
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, Field, model_validator

from featdesc.exceptions import TokenizationError

logger = logging.getLogger(__name__)


class TokenizerSpec(BaseModel):
    """On-disk tokenizer: token string -> id, plus special-token ids."""
    vocab: dict[str, int]
    bos_id: int = Field(..., ge=0)
    eos_id: int = Field(..., ge=0)
    unk_id: Optional[int] = None
    lowercase: bool = False

    @model_validator(mode="after")
    def _ids_unique(self):
        ids = list(self.vocab.values())
        if len(set(ids)) != len(ids):
            raise ValueError("tokenizer vocabulary maps two strings to the same id")
        for special in (self.bos_id, self.eos_id):
            if special not in set(ids):
                raise ValueError(f"special token id {special} is not in the vocabulary")
        return self


class Tokenizer:
    """Greedy longest-match tokenizer over a fixed vocabulary file."""

    def __init__(self, spec: TokenizerSpec):
        self.spec = spec
        self.id_to_token = {i: s for s, i in spec.vocab.items()}
        specials = {spec.bos_id, spec.eos_id} | ({spec.unk_id} if spec.unk_id is not None else set())
        self._pieces = {s: i for s, i in spec.vocab.items() if i not in specials}
        self._max_len = max((len(s) for s in self._pieces), default=1)

    @classmethod
    def from_file(cls, path: Path) -> "Tokenizer":
        with open(path, "r", encoding="utf-8") as f:
            return cls(TokenizerSpec.model_validate(json.load(f)))

    @property
    def bos_id(self) -> int:
        return self.spec.bos_id

    @property
    def eos_id(self) -> int:
        return self.spec.eos_id

    @property
    def vocab_size(self) -> int:
        return max(self.id_to_token) + 1

    def encode(self, text: str, add_bos: bool = True) -> list[int]:
        if self.spec.lowercase:
            text = text.lower()
        ids = [self.bos_id] if add_bos else []
        i = 0
        while i < len(text):
            for length in range(min(self._max_len, len(text) - i), 0, -1):
                token_id = self._pieces.get(text[i:i + length])
                if token_id is not None:
                    ids.append(token_id)
                    i += length
                    break
            else:
                if self.spec.unk_id is None:
                    raise TokenizationError(f"Cannot tokenize character {text[i]!r} in {text[:40]!r}")
                ids.append(self.spec.unk_id)
                i += 1
        return ids

    def token_text(self, token_id: int) -> str:
        return self.id_to_token.get(int(token_id), f"<{int(token_id)}>")

    def decode(self, ids, skip_special: bool = True) -> str:
        specials = {self.bos_id, self.eos_id}
        return "".join(self.token_text(i) for i in ids if not (skip_special and int(i) in specials))

    def save(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.spec.model_dump(), f, indent=2, sort_keys=True)
