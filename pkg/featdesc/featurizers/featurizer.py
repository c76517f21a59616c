"""
Invertible featurizers: map a hidden vector at one hook site to feature
activations, and back to a feature's direction for steering.
"""

import logging
from typing import Optional

import numpy as np

from featdesc.engine.loader import check_tensors, read_container, write_container
from featdesc.exceptions import DimensionMismatch, FeatureIndexError, MissingTensor, ShapeMismatch
from featdesc.models.config import VocabSource
from featdesc.models.featurizers import ActivationKind, SaeManifestEntry
from featdesc.models.features import NEURON, HookSite

logger = logging.getLogger(__name__)


class Featurizer:
    """Base class. Subclasses implement `encode` and the decoder/encoder directions."""

    name: str

    def __init__(self, site: HookSite, d: int, k: int):
        self.site = site
        self.d = d
        self.k = k

    def check_input(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.d:
            raise DimensionMismatch(f"{self.name} expects vectors of dimension {self.d}, got {v.shape[-1]}")
        return v

    def check_index(self, index: int) -> int:
        if not 0 <= int(index) < self.k:
            raise FeatureIndexError(f"Feature index {index} is out of range for {self.name} with k={self.k}")
        return int(index)

    def encode(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def activation(self, v: np.ndarray, index: int) -> np.ndarray:
        """Activation of one feature for every vector in `v` (any leading shape)."""
        return self.encode(v)[..., self.check_index(index)]

    def feature_vector(self, index: int, source: VocabSource = VocabSource.DECODER) -> np.ndarray:
        raise NotImplementedError

    def clamp_edit(self, v: np.ndarray, index: int, m: float) -> np.ndarray:
        """v + (m - a) * d_f where a is the current activation; leaves the reconstruction error untouched."""
        v = self.check_input(v)
        a = self.activation(v, index)
        return v + np.asarray(m - a)[..., None] * self.feature_vector(index)


class NeuronFeaturizer(Featurizer):
    """Identity featurizer: every coordinate of the hidden vector is a feature."""

    name = NEURON

    def __init__(self, site: HookSite, d: int):
        super().__init__(site, d, d)

    def encode(self, v: np.ndarray) -> np.ndarray:
        return self.check_input(v).copy()

    def feature_vector(self, index: int, source: VocabSource = VocabSource.DECODER) -> np.ndarray:
        e = np.zeros(self.d)
        e[self.check_index(index)] = 1.0
        return e

    def clamp_edit(self, v: np.ndarray, index: int, m: float) -> np.ndarray:
        edited = self.check_input(v).copy()
        edited[..., self.check_index(index)] = m
        return edited


class SaeFeaturizer(Featurizer):
    """Sparse autoencoder with ReLU, JumpReLU or TopK latents."""

    def __init__(
        self,
        sae_id: str,
        site: HookSite,
        W_enc: np.ndarray,
        b_enc: np.ndarray,
        W_dec: np.ndarray,
        b_dec: np.ndarray,
        activation: ActivationKind = ActivationKind.RELU,
        threshold: Optional[np.ndarray] = None,
        topk: Optional[int] = None,
    ):
        d, k = W_enc.shape
        super().__init__(site, d, k)
        self.sae_id = sae_id
        self.name = f"sae:{sae_id}"
        self.W_enc, self.b_enc, self.W_dec, self.b_dec = W_enc, b_enc, W_dec, b_dec
        self.activation_kind = activation
        self.threshold = threshold
        self.topk = topk
        if W_dec.shape != (k, d):
            raise ShapeMismatch("W_dec", (k, d), W_dec.shape)
        if b_enc.shape != (k,):
            raise ShapeMismatch("b_enc", (k,), b_enc.shape)
        if b_dec.shape != (d,):
            raise ShapeMismatch("b_dec", (d,), b_dec.shape)
        if activation is ActivationKind.JUMPRELU:
            if threshold is None or threshold.shape != (k,):
                raise ShapeMismatch("threshold", (k,), None if threshold is None else threshold.shape)
            if np.any(threshold < 0):
                raise ValueError("JumpReLU thresholds must be non-negative")
        if activation is ActivationKind.TOPK and not (topk and 1 <= topk <= k):
            raise ValueError(f"TopK needs 1 <= K <= {k}, got {topk}")

    @classmethod
    def load(cls, sae_id: str, entry: SaeManifestEntry, path) -> "SaeFeaturizer":
        raw = read_container(path)
        if "W_enc" not in raw:
            raise MissingTensor("W_enc", str(path))
        d = raw["W_enc"].shape[0]
        shapes = {"W_enc": (d, entry.k), "b_enc": (entry.k,), "W_dec": (entry.k, d), "b_dec": (d,)}
        if entry.activation is ActivationKind.JUMPRELU:
            shapes["threshold"] = (entry.k,)
        tensors = check_tensors(raw, shapes, path)
        logger.info(f"Loaded SAE '{sae_id}' ({entry.activation.value}, k={entry.k}) for {entry.site.name}")
        return cls(
            sae_id,
            entry.site,
            tensors["W_enc"],
            tensors["b_enc"],
            tensors["W_dec"],
            tensors["b_dec"],
            activation=entry.activation,
            threshold=tensors.get("threshold"),
            topk=entry.topk,
        )

    def save(self, path) -> None:
        tensors = {"W_enc": self.W_enc, "b_enc": self.b_enc, "W_dec": self.W_dec, "b_dec": self.b_dec}
        if self.threshold is not None:
            tensors["threshold"] = self.threshold
        write_container(path, tensors)

    def pre_activations(self, v: np.ndarray) -> np.ndarray:
        return self.check_input(v) @ self.W_enc + self.b_enc

    def encode(self, v: np.ndarray) -> np.ndarray:
        pre = self.pre_activations(v)
        if self.activation_kind is ActivationKind.JUMPRELU:
            return np.where(pre > self.threshold, pre, 0.0)
        acts = np.maximum(pre, 0.0)
        if self.activation_kind is ActivationKind.TOPK:
            # stable sort keeps the lower index on ties
            order = np.argsort(-acts, axis=-1, kind="stable")
            mask = np.zeros(acts.shape, dtype=bool)
            np.put_along_axis(mask, order[..., : self.topk], True, axis=-1)
            acts = np.where(mask, acts, 0.0)
        return acts

    def feature_vector(self, index: int, source: VocabSource = VocabSource.DECODER) -> np.ndarray:
        index = self.check_index(index)
        if source is VocabSource.ENCODER:
            return np.array(self.W_enc[:, index])
        return np.array(self.W_dec[index])
