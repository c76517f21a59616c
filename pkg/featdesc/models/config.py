from enum import Enum
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from featdesc.models.evaluation import EvalConfig


class FinalLayerNorm(BaseModel):
    """Final layer norm; gain and bias live in the weight container."""
    gain_tensor: str = "ln_final.w"
    bias_tensor: str = "ln_final.b"
    eps: float = Field(default=1e-5, gt=0)


class PositionalScheme(str, Enum):
    LEARNED = "learned"
    NONE = "none"


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_layers: int = Field(..., ge=1)
    d_model: int = Field(..., ge=1)
    d_mlp: int = Field(..., ge=1)
    n_heads: int = Field(..., ge=1)
    vocab_size: int = Field(..., ge=2)
    n_ctx: int = Field(default=128, ge=1, description="Context limit in tokens")
    final_layernorm: FinalLayerNorm = Field(default_factory=FinalLayerNorm)
    positional: PositionalScheme = PositionalScheme.LEARNED
    layernorm_enabled: bool = True

    @model_validator(mode="after")
    def _heads_divide_width(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        return self

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def n_nonembed_params(self) -> int:
        d, m = self.d_model, self.d_mlp
        attn = 4 * d * d + 4 * d
        mlp = 2 * d * m + m + d
        norms = 4 * d if self.layernorm_enabled else 0
        return self.n_layers * (attn + mlp + norms)


class SamplingMode(str, Enum):
    GREEDY = "greedy"
    TEMPERATURE = "temperature"


class SamplingConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: SamplingMode = SamplingMode.TEMPERATURE
    temperature: float = Field(default=1.0, gt=0)
    seed: int = 0
    max_new_tokens: int = Field(default=25, ge=0)


class RoleClass(str, Enum):
    EXPLAINER = "explainer"
    SENTENCE_GENERATOR = "sentence_generator"
    JUDGE = "judge"


class RoleEndpoint(BaseModel):
    url: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4o-mini"
    api_key_env: str = "OPENAI_API_KEY"


class RetryPolicy(BaseModel):
    max_attempts: int = Field(default=5, ge=1)
    backoff_initial: float = Field(default=1.0, ge=0)
    backoff_max: float = Field(default=30.0, ge=0)


def _default_roles() -> dict[RoleClass, RoleEndpoint]:
    return {role: RoleEndpoint() for role in RoleClass}


class GatewayConfig(BaseModel):
    backend: Literal["http", "mock"] = "mock"
    roles: dict[RoleClass, RoleEndpoint] = Field(default_factory=_default_roles)
    cache_dir: Optional[Path] = None
    retry: RetryPolicy = Field(default_factory=RetryPolicy)
    rate_limit_rpm: int = Field(default=500, ge=1)
    timeout: float = Field(default=60.0, gt=0)
    mock_judge: Literal["overlap", "random"] = "overlap"

    @field_validator("roles")
    @classmethod
    def _fill_roles(cls, roles: dict) -> dict:
        return {**_default_roles(), **roles}


class IndexConfig(BaseModel):
    k_top: int = Field(default=5, ge=1)
    n_bands: int = Field(default=4, ge=1)
    samples_per_band: int = Field(default=2, ge=0)
    window: int = Field(default=128, ge=2, description="Sequence window in tokens, BOS included")
    dead_threshold: float = 0.0
    batch_size: int = Field(default=16, ge=1)


class VocabSource(str, Enum):
    DECODER = "decoder"
    ENCODER = "encoder"


class VocabTarget(str, Enum):
    UNEMBED = "unembed"
    EMBED = "embed"


class VocabProjVariant(BaseModel):
    model_config = ConfigDict(frozen=True)

    source: VocabSource = VocabSource.DECODER
    target: VocabTarget = VocabTarget.UNEMBED

    @property
    def label(self) -> str:
        return f"{self.source.value}+{self.target.value}"


class MethodParams(BaseModel):
    t_vocabproj: int = Field(default=50, ge=1)
    t_tokenchange: int = Field(default=20, ge=1)
    k_prompts: int = Field(default=32, ge=1)
    prompt_len: int = Field(default=32, ge=1)
    tokenchange_kl_target: float = Field(default=0.5, gt=0)
    maxact_top: int = Field(default=5, ge=1)
    vocabproj_variant: VocabProjVariant = Field(default_factory=VocabProjVariant)


class RevivalSchedule(BaseModel):
    """Number of random token combinations per combination length."""
    counts: dict[int, int] = Field(default_factory=lambda: {2: 250, 3: 250, 5: 200, 12: 200, 25: 100, 32: 50})

    @property
    def n_combos(self) -> int:
        return sum(self.counts.values())


class RevivalConfig(BaseModel):
    n_sentences: int = Field(default=150, ge=0)
    batch_size: int = Field(default=64, ge=1)
    schedule: RevivalSchedule = Field(default_factory=RevivalSchedule)


class ModelSection(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    model_id: str = "toy-2l"
    weights: Path
    tokenizer: Path
    config: ModelConfig


class PipelineConfig(BaseModel):
    model: ModelSection
    featurizers: Path
    corpus: Path
    output_dir: Path = Path("runs/default")
    seed: int = 0
    workers: int = Field(default=1, ge=1)
    fixed_timestamps: Optional[bool] = None
    template_dir: Optional[Path] = None
    index: IndexConfig = Field(default_factory=IndexConfig)
    methods: MethodParams = Field(default_factory=MethodParams)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    revival: RevivalConfig = Field(default_factory=RevivalConfig)
    gateway: GatewayConfig = Field(default_factory=GatewayConfig)

    @property
    def pinned_clock(self) -> bool:
        if self.fixed_timestamps is not None:
            return self.fixed_timestamps
        return self.gateway.backend == "mock"


class CostModel(BaseModel):
    n_nonembed_params: float = Field(..., gt=0)
    corpus_tokens: float = Field(..., ge=0)
    feature_count: float = Field(..., gt=0)
    d_model: int = Field(..., gt=0)
    vocab_size: int = Field(..., gt=0)

    @classmethod
    def from_model_config(cls, config: ModelConfig, corpus_tokens: float, feature_count: float) -> "CostModel":
        return cls(
            n_nonembed_params=config.n_nonembed_params(),
            corpus_tokens=corpus_tokens,
            feature_count=feature_count,
            d_model=config.d_model,
            vocab_size=config.vocab_size,
        )
