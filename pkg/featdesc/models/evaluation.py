from datetime import datetime
from enum import Enum
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from featdesc.models.features import FeatureRef

DEFAULT_OPEN_ENDED_PROMPTS = ["I think", "Honestly,", "The most important thing"]


class Sign(str, Enum):
    POSITIVE = "+"
    NEGATIVE = "-"

    @property
    def factor(self) -> float:
        return 1.0 if self is Sign.POSITIVE else -1.0


class EvalConfig(BaseModel):
    n_sentences_per_set: int = Field(default=5, ge=1)
    open_ended_prompts: list[str] = Field(default_factory=lambda: list(DEFAULT_OPEN_ENDED_PROMPTS), min_length=1)
    max_gen_tokens: int = Field(default=25, ge=0)
    kl_targets: list[float] = Field(default_factory=lambda: [0.25, 0.5], min_length=1)
    signs: list[Sign] = Field(default_factory=lambda: [Sign.POSITIVE, Sign.NEGATIVE], min_length=1)
    calibration_tolerance: float = Field(default=0.01, gt=0)
    calibration_cap: float = Field(default=2.0 ** 16, gt=1)
    calibration_max_iter: int = Field(default=60, ge=1)
    temperature: float = Field(default=1.0, gt=0)
    greedy: bool = False
    seed: int = 0
    max_reasks: int = Field(default=2, ge=0)
    distractor_attempts: int = Field(default=8, ge=1)

    @field_validator("kl_targets")
    @classmethod
    def _positive_targets(cls, targets: list[float]) -> list[float]:
        if any(t <= 0 for t in targets):
            raise ValueError("kl_targets must be strictly positive")
        return targets

    @property
    def clamp_schedule(self) -> list[tuple[float, Sign]]:
        """Cartesian (target, sign) pairs, grouped by sign with increasing targets."""
        return [(target, sign) for sign in self.signs for target in sorted(self.kl_targets)]


class InputEvalResult(BaseModel):
    mean_activating: float
    mean_neutral: float
    activating_max: list[float]
    neutral_max: list[float]
    activating: list[str] = Field(default_factory=list)
    neutral: list[str] = Field(default_factory=list)
    passed: bool = Field(..., alias="pass")

    model_config = ConfigDict(populate_by_name=True)

    @model_validator(mode="after")
    def _strict_pass(self):
        if self.passed != (self.mean_activating > self.mean_neutral):
            raise ValueError("pass must equal mean_activating > mean_neutral")
        return self


class SteeredText(BaseModel):
    prompt: str
    clamp_value: float
    text: str
    n_tokens: int = Field(..., ge=0)


class SteeredTextSet(BaseModel):
    steered_feature: FeatureRef
    clamp_values: list[float]
    generations: list[SteeredText]

    @property
    def texts(self) -> list[str]:
        return [f"{g.prompt}{g.text}" for g in self.generations]

    def __len__(self) -> int:
        return len(self.generations)


class OutputEvalResult(BaseModel):
    target_feature: FeatureRef
    distractors: tuple[FeatureRef, FeatureRef]
    presentation_order: list[int] = Field(..., description="Entry i is 0 for the target, 1/2 for distractors")
    judge_choice: int = Field(..., ge=1, le=3)
    target_clamp_values: list[float] = Field(default_factory=list)
    passed: bool = Field(..., alias="pass")

    model_config = ConfigDict(populate_by_name=True)

    @model_validator(mode="after")
    def _choice_matches(self):
        if self.passed != (self.presentation_order[self.judge_choice - 1] == 0):
            raise ValueError("pass must equal 'judge picked the target set'")
        return self


class EvalRecord(BaseModel):
    """One line of evals.jsonl."""
    feature: FeatureRef
    description_method: str
    metric: Literal["input", "output"]
    description: str
    payload: Union[InputEvalResult, OutputEvalResult]
    passed: bool = Field(..., alias="pass")
    seeds: dict[str, int] = Field(default_factory=dict)
    timestamps: dict[str, datetime] = Field(default_factory=dict)

    model_config = ConfigDict(populate_by_name=True)


class MethodSummary(BaseModel):
    method: str
    metric: Literal["input", "output"]
    group: str = "all"
    n: int
    passed: int
    pass_rate: float
    ci_low: float
    ci_high: float
    bootstrap_low: Optional[float] = None
    bootstrap_high: Optional[float] = None
