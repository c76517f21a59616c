from enum import Enum
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from featdesc.models.features import HookSite


class ActivationKind(str, Enum):
    RELU = "relu"
    JUMPRELU = "jumprelu"
    TOPK = "topk"


class SaeManifestEntry(BaseModel):
    """One SAE in the featurizer manifest."""
    file: Path
    site: HookSite
    activation: ActivationKind = ActivationKind.RELU
    k: int = Field(..., ge=1, description="Number of latents")
    topk: Optional[int] = Field(default=None, ge=1)

    @field_validator("site", mode="before")
    @classmethod
    def _parse_site(cls, site):
        return HookSite.parse(site) if isinstance(site, str) else site

    @model_validator(mode="after")
    def _topk_set(self):
        if self.activation is ActivationKind.TOPK:
            if self.topk is None:
                raise ValueError("topk activation needs a 'topk' count")
            if self.topk > self.k:
                raise ValueError(f"topk={self.topk} exceeds k={self.k}")
        return self
