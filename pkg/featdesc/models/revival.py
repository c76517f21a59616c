from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator

from featdesc.models.features import FeatureRef


class ComboPrompt(BaseModel):
    length: int = Field(..., ge=1, description="Number of sampled tokens after BOS")
    tokens: list[int]


class RevivalPlan(BaseModel):
    feature: FeatureRef
    token_pool: list[int]
    llm_sentences: list[str] = Field(default_factory=list, max_length=150)
    combo_prompts: list[ComboPrompt] = Field(default_factory=list)
    seed: int
    bos_id: int
    degraded: bool = False

    @model_validator(mode="after")
    def _bos_first(self):
        if any(not c.tokens or c.tokens[0] != self.bos_id for c in self.combo_prompts):
            raise ValueError("every combo prompt must begin with BOS")
        return self

    @property
    def n_candidates(self) -> int:
        return len(self.combo_prompts) + len(self.llm_sentences)


WitnessKind = Literal["single", "combo", "llm_sentence"]


class RevivalResult(BaseModel):
    """One line of revival.jsonl."""
    feature: FeatureRef
    activated: bool
    witness: Optional[str] = None
    witness_tokens: Optional[list[int]] = None
    witness_kind: Optional[WitnessKind] = None
    witness_length: Optional[int] = None
    witness_activation: float = 0.0
    candidates_tried: int = Field(..., ge=0)
    seed: int
    degraded: bool = False

    @model_validator(mode="after")
    def _witness_positive(self):
        if self.activated and not (self.witness_activation > 0 and self.witness_tokens):
            raise ValueError("an activated result needs a witness with positive activation")
        return self
