from enum import Enum
import re

from pydantic import BaseModel, ConfigDict, Field


class HookKind(str, Enum):
    RESID_POST = "resid_post"
    MLP_HIDDEN = "mlp_hidden"


class HookSite(BaseModel):
    """Location of a hidden vector inside the model."""
    model_config = ConfigDict(frozen=True)

    kind: HookKind
    layer: int = Field(..., ge=0)

    @property
    def name(self) -> str:
        return f"{self.kind.value}.{self.layer}"

    @classmethod
    def parse(cls, text: str) -> "HookSite":
        kind, _, layer = text.strip().rpartition(".")
        if not kind or not layer.isdigit():
            raise ValueError(f"Invalid hook site '{text}', expected e.g. 'resid_post.1'")
        return cls(kind=HookKind(kind), layer=int(layer))

    def sort_key(self) -> tuple:
        return (self.layer, self.kind.value)


NEURON = "neuron"

_FEATURE_RE = re.compile(
    r"^(?:(?P<model>[^/]+)/)?(?P<site>[a-z_]+\.\d+)/(?P<featurizer>neuron|sae:[^/]+)/(?P<index>\d+)(?:-(?P<stop>\d+))?$"
)


class FeatureRef(BaseModel):
    """Globally unique identity of a feature: model, hook site, featurizer, index."""
    model_config = ConfigDict(frozen=True)

    model: str = Field(..., min_length=1)
    site: HookSite
    featurizer: str = Field(..., description="'neuron' or 'sae:<sae_id>'")
    index: int = Field(..., ge=0)

    @property
    def is_neuron(self) -> bool:
        return self.featurizer == NEURON

    @property
    def sae_id(self) -> str | None:
        return None if self.is_neuron else self.featurizer.split(":", 1)[1]

    @property
    def key(self) -> str:
        return f"{self.model}/{self.site.name}/{self.featurizer}/{self.index}"

    def sort_key(self) -> tuple:
        return (self.model, self.site.layer, self.site.kind.value, self.featurizer, self.index)

    def with_index(self, index: int) -> "FeatureRef":
        return self.model_copy(update={"index": index})

    @classmethod
    def parse_many(cls, text: str, default_model: str) -> list["FeatureRef"]:
        """Parses 'resid_post.1/sae:toy/3' or a range 'resid_post.1/neuron/0-7' (inclusive)."""
        match = _FEATURE_RE.match(text.strip())
        if not match:
            raise ValueError(f"Invalid feature reference '{text}'")
        site = HookSite.parse(match["site"])
        model = match["model"] or default_model
        start = int(match["index"])
        stop = int(match["stop"]) if match["stop"] else start
        if stop < start:
            raise ValueError(f"Empty feature range in '{text}'")
        return [cls(model=model, site=site, featurizer=match["featurizer"], index=i) for i in range(start, stop + 1)]

    def __str__(self) -> str:
        return self.key
