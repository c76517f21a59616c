from pydantic import BaseModel, Field, model_validator

from featdesc.models.features import FeatureRef


class ActivationRecord(BaseModel):
    """Token-level activations of one feature over one corpus sequence."""
    doc_id: str
    tokens: list[int]
    activations: list[float]
    max_activation: float

    @model_validator(mode="after")
    def _consistent(self):
        if len(self.tokens) != len(self.activations):
            raise ValueError("activations must have one value per token")
        return self

    def sort_key(self) -> tuple:
        return (-self.max_activation, self.doc_id)


class QuantileBand(BaseModel):
    lower: float = Field(..., description="Exclusive lower bound as a fraction of corpus_max")
    upper: float = Field(..., description="Inclusive upper bound as a fraction of corpus_max")
    records: list[ActivationRecord] = Field(default_factory=list)


class FeatureActivationSummary(BaseModel):
    feature: FeatureRef
    top_records: list[ActivationRecord] = Field(default_factory=list)
    quantile_samples: list[QuantileBand] = Field(default_factory=list)
    activation_density: float = Field(..., ge=0.0, le=1.0)
    corpus_max: float
    total_tokens: int = Field(..., ge=0)
    active_tokens: int = Field(..., ge=0)
    n_sequences: int = Field(..., ge=0)

    @property
    def quantile_records(self) -> list[ActivationRecord]:
        return [record for band in self.quantile_samples for record in band.records]
