import json
import logging
import threading
from pathlib import Path
from typing import Optional

from featdesc.engine.transformer import Model
from featdesc.exceptions import ConfigError, DimensionMismatch
from featdesc.featurizers.featurizer import Featurizer, NeuronFeaturizer, SaeFeaturizer
from featdesc.models.featurizers import SaeManifestEntry
from featdesc.models.features import NEURON, FeatureRef, HookSite

logger = logging.getLogger(__name__)


def read_manifest(path: Path) -> dict[str, SaeManifestEntry]:
    """Manifest JSON: sae_id -> {file, site, activation, k, topk}; files resolve against the manifest's folder."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    entries = {}
    for sae_id, entry in raw.items():
        parsed = SaeManifestEntry.model_validate(entry)
        if not parsed.file.is_absolute():
            parsed = parsed.model_copy(update={"file": path.parent / parsed.file})
        entries[sae_id] = parsed
    return entries


def write_manifest(path: Path, entries: dict[str, SaeManifestEntry]) -> None:
    payload = {
        sae_id: {**e.model_dump(mode="json", exclude_none=True), "site": e.site.name}
        for sae_id, e in sorted(entries.items())
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


class FeaturizerRegistry:
    """Resolves a FeatureRef to its featurizer; SAEs load lazily, neuron bases are built on demand."""

    def __init__(self, model: Model, manifest: Optional[dict[str, SaeManifestEntry]] = None):
        self.model = model
        self.manifest = manifest or {}
        self._cache: dict[tuple[str, HookSite], Featurizer] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_manifest(cls, model: Model, path: Optional[Path]) -> "FeaturizerRegistry":
        return cls(model, read_manifest(path) if path else {})

    def register(self, featurizer: Featurizer) -> None:
        """Adds an in-memory featurizer (used by fixtures and tests)."""
        self._check_site_dim(featurizer)
        with self._lock:
            self._cache[(featurizer.name, featurizer.site)] = featurizer

    def _check_site_dim(self, featurizer: Featurizer) -> None:
        expected = self.model.site_dim(featurizer.site)
        if featurizer.d != expected:
            raise DimensionMismatch(
                f"{featurizer.name} reads {featurizer.d}-dim vectors but {featurizer.site.name} has dimension {expected}"
            )

    def get(self, name: str, site: HookSite) -> Featurizer:
        key = (name, site)
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        if name == NEURON:
            featurizer: Featurizer = NeuronFeaturizer(site, self.model.site_dim(site))
        else:
            sae_id = name.split(":", 1)[1]
            entry = self.manifest.get(sae_id)
            if entry is None:
                raise ConfigError(f"SAE '{sae_id}' is not in the featurizer manifest")
            if entry.site != site:
                raise ConfigError(f"SAE '{sae_id}' reads {entry.site.name}, not {site.name}")
            featurizer = SaeFeaturizer.load(sae_id, entry, entry.file)
            self._check_site_dim(featurizer)
        with self._lock:
            return self._cache.setdefault(key, featurizer)

    def for_feature(self, feature: FeatureRef) -> Featurizer:
        featurizer = self.get(feature.featurizer, feature.site)
        featurizer.check_index(feature.index)
        return featurizer

    def width(self, name: str, site: HookSite) -> int:
        return self.get(name, site).k
