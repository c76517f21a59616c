"""Shared fixtures: one toy fixture per test session, generated into a temp directory."""

import pytest

from featdesc.agents.llm import LLMGateway
from featdesc.agents.mock_llm import MockBackend
from featdesc.controllers.index_controller import read_corpus, tokenize_corpus
from featdesc.engine.fixtures import TOY_CONFIG, TOY_MODEL_ID, build_toy_fixture
from featdesc.engine.tokenizer import Tokenizer
from featdesc.engine.transformer import Model
from featdesc.featurizers.registry import FeaturizerRegistry
from featdesc.models import FeatureRef, GatewayConfig, HookKind, HookSite

RESID_0 = HookSite(kind=HookKind.RESID_POST, layer=0)
RESID_1 = HookSite(kind=HookKind.RESID_POST, layer=1)
MLP_1 = HookSite(kind=HookKind.MLP_HIDDEN, layer=1)

CAT_FEATURE = FeatureRef(model=TOY_MODEL_ID, site=RESID_0, featurizer="sae:markers", index=0)
ZEBRA_FEATURE = FeatureRef(model=TOY_MODEL_ID, site=RESID_0, featurizer="sae:markers", index=1)


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    return build_toy_fixture(tmp_path_factory.mktemp("toy"), seed=0)


@pytest.fixture(scope="session")
def model(toy):
    return Model.load(toy.weights, TOY_CONFIG, model_id=TOY_MODEL_ID)


@pytest.fixture(scope="session")
def tokenizer(toy):
    return Tokenizer.from_file(toy.tokenizer)


@pytest.fixture(scope="session")
def registry(toy, model):
    return FeaturizerRegistry.from_manifest(model, toy.featurizers)


@pytest.fixture(scope="session")
def sequences(toy, tokenizer):
    return tokenize_corpus(read_corpus(toy.corpus), tokenizer, window=64, n_ctx=TOY_CONFIG.n_ctx)


@pytest.fixture
def gateway():
    return LLMGateway(GatewayConfig(backend="mock"), backend=MockBackend())


@pytest.fixture
def random_judge_gateway():
    return LLMGateway(GatewayConfig(backend="mock", mock_judge="random"), backend=MockBackend(judge_mode="random"))
