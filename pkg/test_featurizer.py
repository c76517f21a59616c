"""
Featurizer tests: encoding for each SAE activation, clamp semantics and the
manifest registry.
"""

import logging

import numpy as np
import pytest

from featdesc.engine.fixtures import CAT_DIM, MARKER_VALUE, TOY_CONFIG, TOY_MODEL_ID, marker_sae
from featdesc.engine.loader import write_container
from featdesc.exceptions import ConfigError, DimensionMismatch, FeatureIndexError, MissingTensor
from featdesc.featurizers.featurizer import NeuronFeaturizer, SaeFeaturizer
from featdesc.featurizers.registry import FeaturizerRegistry
from featdesc.models import FeatureRef, VocabSource
from featdesc.models.featurizers import ActivationKind, SaeManifestEntry

from conftest import MLP_1, RESID_0, RESID_1

logger = logging.getLogger(__name__)


def _all_featurizers(registry):
    return [
        registry.get("sae:toy", RESID_0),
        registry.get("sae:markers", RESID_0),
        registry.get("sae:toy_topk", RESID_1),
        registry.get("sae:toy_jump", MLP_1),
        registry.get("neuron", RESID_0),
        registry.get("neuron", MLP_1),
    ]


def test_clamp_to_current_activation_is_identity(registry):
    rng = np.random.default_rng(0)
    featurizers = _all_featurizers(registry)
    for trial in range(100):
        featurizer = featurizers[trial % len(featurizers)]
        v = rng.normal(0.0, 2.0, featurizer.d)
        index = int(rng.integers(featurizer.k))
        a = float(featurizer.activation(v, index))
        np.testing.assert_allclose(featurizer.clamp_edit(v, index, a), v, atol=1e-12)
    logger.info("✓ clamp_edit leaves v unchanged at the current activation")


def test_clamp_reaches_target_on_unit_encoder_decoder_pairs():
    sae = marker_sae()
    v = np.zeros(TOY_CONFIG.d_model)
    v[CAT_DIM] = MARKER_VALUE
    assert sae.activation(v, 0) == pytest.approx(MARKER_VALUE - 1.0)
    for m in (0.5, 4.0, 25.0):
        edited = sae.clamp_edit(v, 0, m)
        assert sae.activation(edited, 0) == pytest.approx(m, abs=1e-5)


def test_clamp_edit_broadcasts_over_positions(registry):
    sae = registry.get("sae:toy", RESID_0)
    v = np.random.default_rng(1).normal(size=(2, 5, sae.d))
    edited = sae.clamp_edit(v, 2, 3.0)
    assert edited.shape == v.shape
    expected = v + (3.0 - sae.activation(v, 2))[..., None] * sae.feature_vector(2)
    np.testing.assert_allclose(edited, expected)


def test_neuron_featurizer():
    neuron = NeuronFeaturizer(MLP_1, TOY_CONFIG.d_mlp)
    v = np.arange(TOY_CONFIG.d_mlp, dtype=float)
    np.testing.assert_array_equal(neuron.encode(v), v)
    edited = neuron.clamp_edit(v, 4, -2.0)
    assert edited[4] == -2.0
    assert np.array_equal(np.delete(edited, 4), np.delete(v, 4))
    direction = neuron.feature_vector(4, VocabSource.ENCODER)
    assert direction[4] == 1.0 and direction.sum() == 1.0
    with pytest.raises(DimensionMismatch):
        neuron.encode(np.zeros(TOY_CONFIG.d_model))
    with pytest.raises(FeatureIndexError):
        neuron.activation(v, TOY_CONFIG.d_mlp)


def _tiny_sae(activation, **kwargs):
    W_enc = np.eye(4)
    return SaeFeaturizer("tiny", RESID_0, W_enc, np.zeros(4), np.eye(4), np.zeros(4), activation=activation, **kwargs)


def test_relu_encoding():
    sae = _tiny_sae(ActivationKind.RELU)
    np.testing.assert_array_equal(sae.encode(np.array([1.0, -2.0, 0.5, 0.0])), [1.0, 0.0, 0.5, 0.0])


def test_jumprelu_encoding_uses_strict_threshold():
    sae = _tiny_sae(ActivationKind.JUMPRELU, threshold=np.array([0.5, 0.5, 1.0, 0.0]))
    np.testing.assert_array_equal(sae.encode(np.array([0.5, 0.6, 2.0, -1.0])), [0.0, 0.6, 2.0, 0.0])


def test_topk_keeps_largest_and_breaks_ties_by_index():
    sae = _tiny_sae(ActivationKind.TOPK, topk=2)
    np.testing.assert_array_equal(sae.encode(np.array([1.0, 3.0, 1.0, 2.0])), [0.0, 3.0, 0.0, 2.0])
    np.testing.assert_array_equal(sae.encode(np.array([2.0, 1.0, 2.0, 2.0])), [2.0, 0.0, 2.0, 0.0])
    batch = sae.encode(np.array([[1.0, 3.0, 1.0, 2.0], [4.0, 0.0, 0.0, 5.0]]))
    assert (batch > 0).sum(axis=-1).tolist() == [2, 2]


def test_registry_lookups(registry):
    marker = FeatureRef(model=TOY_MODEL_ID, site=RESID_0, featurizer="sae:markers", index=1)
    assert registry.for_feature(marker).k == 2
    with pytest.raises(FeatureIndexError):
        registry.for_feature(marker.with_index(2))
    with pytest.raises(ConfigError):
        registry.get("sae:nope", RESID_0)
    with pytest.raises(ConfigError, match="reads resid_post.0") as excinfo:
        registry.get("sae:markers", RESID_1)
    assert excinfo.value.exit_code == 2
    assert registry.width("neuron", MLP_1) == TOY_CONFIG.d_mlp
    assert registry.get("sae:toy", RESID_0) is registry.get("sae:toy", RESID_0)


def test_registry_rejects_wrong_site_dimension(model):
    registry = FeaturizerRegistry(model)
    with pytest.raises(DimensionMismatch):
        registry.register(NeuronFeaturizer(RESID_0, TOY_CONFIG.d_mlp))


def test_sae_without_encoder_fails_to_load(tmp_path, model):
    path = tmp_path / "broken.safetensors"
    write_container(path, {"W_dec": np.zeros((2, TOY_CONFIG.d_model)), "b_dec": np.zeros(TOY_CONFIG.d_model)})
    registry = FeaturizerRegistry(model, {"broken": SaeManifestEntry(file=path, site=RESID_0, k=2)})
    with pytest.raises(MissingTensor):
        registry.get("sae:broken", RESID_0)


def test_saved_sae_reloads_identically(tmp_path, model):
    original = marker_sae()
    original.save(tmp_path / "markers.safetensors")
    registry = FeaturizerRegistry(model, {"markers": SaeManifestEntry(file=tmp_path / "markers.safetensors", site=RESID_0, k=2)})
    reloaded = registry.get("sae:markers", RESID_0)
    v = np.random.default_rng(2).normal(size=(3, TOY_CONFIG.d_model)) * 5
    np.testing.assert_array_equal(reloaded.encode(v), original.encode(v))
