import hashlib
import json
from typing import Literal

from pydantic import BaseModel, Field

from featdesc.models.config import RoleClass


class ChatMessage(BaseModel):
    role: Literal["system", "user"]
    content: str = Field(..., min_length=1)


class Decoding(BaseModel):
    temperature: float = Field(default=0.0, ge=0)
    max_tokens: int = Field(default=512, ge=1)


DEFAULT_DECODING = {
    RoleClass.EXPLAINER: Decoding(temperature=0.0, max_tokens=512),
    RoleClass.SENTENCE_GENERATOR: Decoding(temperature=0.7, max_tokens=1024),
    RoleClass.JUDGE: Decoding(temperature=0.0, max_tokens=16),
}


class ChatRequest(BaseModel):
    role_class: RoleClass
    messages: list[ChatMessage] = Field(..., min_length=1)
    decoding: Decoding = Field(default_factory=Decoding)

    @classmethod
    def for_role(cls, role_class: RoleClass, messages: list[ChatMessage]) -> "ChatRequest":
        return cls(role_class=role_class, messages=messages, decoding=DEFAULT_DECODING[role_class])

    def canonical_messages(self) -> str:
        return json.dumps([m.model_dump() for m in self.messages], sort_keys=True, ensure_ascii=False)

    @property
    def prompt_hash(self) -> str:
        return hashlib.sha256(self.canonical_messages().encode("utf-8")).hexdigest()

    def cache_key(self, model: str) -> str:
        payload = {
            "role_class": self.role_class.value,
            "model": model,
            "messages": [m.model_dump() for m in self.messages],
            "decoding": self.decoding.model_dump(),
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")).hexdigest()

    def with_correction(self, previous: str, problem: str) -> "ChatRequest":
        """Re-ask: quotes the rejected answer and states what was wrong with it."""
        note = (
            f"Your previous answer could not be used ({problem}). Previous answer:\n{previous}\n\n"
            "Answer again, following the required format exactly."
        )
        return self.model_copy(update={"messages": [*self.messages, ChatMessage(role="user", content=note)]})
