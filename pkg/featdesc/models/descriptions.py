from datetime import datetime
from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from featdesc.models.features import FeatureRef


class BaseMethod(str, Enum):
    MAXACT = "maxact"
    VOCABPROJ = "vocabproj"
    TOKENCHANGE = "tokenchange"

    @property
    def rank(self) -> int:
        return _CANONICAL_ORDER.index(self)


_CANONICAL_ORDER = [BaseMethod.MAXACT, BaseMethod.VOCABPROJ, BaseMethod.TOKENCHANGE]


class MethodKind(str, Enum):
    MAXACT = "maxact"
    VOCABPROJ = "vocabproj"
    TOKENCHANGE = "tokenchange"
    ENSEMBLE_RAW = "ensemble_raw"
    ENSEMBLE_CONCAT = "ensemble_concat"

    @property
    def is_ensemble(self) -> bool:
        return self in (MethodKind.ENSEMBLE_RAW, MethodKind.ENSEMBLE_CONCAT)


def canonical_members(members) -> tuple[BaseMethod, ...]:
    return tuple(sorted({BaseMethod(m) for m in members}, key=lambda m: m.rank))


class MethodSpec(BaseModel):
    """A description method; ensembles carry their member set in canonical order."""
    model_config = ConfigDict(frozen=True)

    kind: MethodKind
    members: tuple[BaseMethod, ...] = ()

    @field_validator("members", mode="before")
    @classmethod
    def _canonical(cls, members):
        return canonical_members(members or ())

    @model_validator(mode="after")
    def _members_match_kind(self):
        if self.kind.is_ensemble and len(self.members) < 2:
            raise ValueError(f"{self.kind.value} needs at least two member methods")
        if not self.kind.is_ensemble and self.members:
            raise ValueError(f"{self.kind.value} takes no member methods")
        return self

    @property
    def label(self) -> str:
        if not self.kind.is_ensemble:
            return self.kind.value
        return f"{self.kind.value}:{'+'.join(m.value for m in self.members)}"

    @property
    def base(self) -> Optional[BaseMethod]:
        return None if self.kind.is_ensemble else BaseMethod(self.kind.value)

    def sort_key(self) -> tuple:
        kinds = list(MethodKind)
        return (kinds.index(self.kind), tuple(m.rank for m in self.members))

    @classmethod
    def parse(cls, text: str) -> "MethodSpec":
        """'vocabproj', 'ensemble_raw:maxact+vocabproj', 'ensemble_concat:all'."""
        kind, _, members = text.strip().partition(":")
        if members == "all":
            member_list = list(BaseMethod)
        else:
            member_list = [m for m in members.split("+") if m]
        return cls(kind=MethodKind(kind), members=member_list)

    @classmethod
    def single(cls, method: BaseMethod) -> "MethodSpec":
        return cls(kind=MethodKind(method.value))


class TokenScore(BaseModel):
    token_id: int = Field(..., ge=0)
    token_text: str
    score: float


class RenderedRecord(BaseModel):
    """An activation record as shown to the explainer: token text and activation per position."""
    doc_id: str
    tokens: list[str]
    activations: list[float]
    max_activation: float


class Evidence(BaseModel):
    """Raw inputs one base method hands to the explainer."""
    method: BaseMethod
    records: list[RenderedRecord] = Field(default_factory=list)
    quantile_records: list[RenderedRecord] = Field(default_factory=list)
    promoted: list[TokenScore] = Field(default_factory=list)
    suppressed: list[TokenScore] = Field(default_factory=list)
    clamp_value: Optional[float] = None

    @property
    def is_empty(self) -> bool:
        return not (self.records or self.promoted or self.suppressed)


class LLMFingerprint(BaseModel):
    model: str
    prompt_hash: str
    template_version: Optional[str] = None


class Description(BaseModel):
    """One line of descriptions.jsonl."""
    feature: FeatureRef
    method: MethodSpec
    text: str = Field(..., min_length=1)
    evidence: list[Evidence] = Field(default_factory=list)
    llm: Optional[LLMFingerprint] = None
    created_at: Optional[datetime] = None

    @model_validator(mode="after")
    def _evidence_present(self):
        if not self.text.strip():
            raise ValueError("description text must be non-empty")
        if self.method.kind is not MethodKind.ENSEMBLE_CONCAT and not self.evidence:
            raise ValueError(f"{self.method.label} descriptions must carry their evidence")
        return self

    def sort_key(self) -> tuple:
        return (self.feature.sort_key(), self.method.sort_key())


class MetricName(str, Enum):
    INPUT = "input"
    OUTPUT = "output"


