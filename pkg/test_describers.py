"""
Describer tests: vocabulary projection and token change against dense
oracles, explainer calls through the mock backend, ensembles.
"""

import logging

import numpy as np
import pytest

from featdesc.controllers.describe_controller import (
    DescribeController,
    describe_maxact,
    describe_tokenchange,
    describe_vocabproj,
    ensemble_concat,
    ensemble_raw,
    maxact_evidence,
    sample_token_change_prompts,
    token_change_deltas,
    token_change_scores,
    token_list_evidence,
    vocab_projection_tokens,
)
from featdesc.controllers.index_controller import build_index
from featdesc.engine.fixtures import TOY_CONFIG, TOY_MODEL_ID
from featdesc.engine.transformer import Intervention, Model
from featdesc.exceptions import DependencyError, PreconditionError
from featdesc.featurizers.featurizer import SaeFeaturizer
from featdesc.models import (
    BaseMethod,
    Description,
    EvalConfig,
    FeatureRef,
    IndexConfig,
    MethodKind,
    MethodParams,
    MethodSpec,
    ModelConfig,
    TokenScore,
    VocabProjVariant,
    VocabSource,
    VocabTarget,
)

from conftest import CAT_FEATURE, MLP_1, RESID_0, RESID_1, ZEBRA_FEATURE

logger = logging.getLogger(__name__)


def _sae_from_decoder(W_dec, site=RESID_1, sae_id="decoder"):
    k, d = W_dec.shape
    return SaeFeaturizer(sae_id, site, W_dec.T.copy(), np.zeros(k), W_dec, np.zeros(d))


def _ref(featurizer, index, site=RESID_1):
    return FeatureRef(model=TOY_MODEL_ID, site=site, featurizer=featurizer.name, index=index)


def _scores(tokens, values):
    return [TokenScore(token_id=i, token_text=t, score=s) for i, (t, s) in enumerate(zip(tokens, values))]


@pytest.fixture(scope="module")
def random_decoder():
    return np.random.default_rng(11).normal(size=(50, TOY_CONFIG.d_model))


# ── vocabulary projection ───────────────────────────────────────────────────────

def test_vocab_projection_on_identity_unembedding():
    config = ModelConfig(n_layers=1, d_model=4, d_mlp=4, n_heads=1, vocab_size=4, n_ctx=4)
    weights = {"ln_final.w": np.ones(4), "ln_final.b": np.zeros(4), "unembed.W_U": np.eye(4), "embed.W_E": np.eye(4)}
    model = Model(config, weights)
    site = RESID_0
    sae = _sae_from_decoder(np.array([[3.0, 1.0, 1.0, 1.0]]), site=site)
    top, bottom = vocab_projection_tokens(model, sae, _ref(sae, 0, site), 1)
    assert top[0].token_id == 0
    assert bottom[0].token_id == 1
    assert top[0].score == pytest.approx(1.5 / np.sqrt(0.75 + 1e-5))


def test_vocab_projection_matches_dense_sort(model, random_decoder):
    sae = _sae_from_decoder(random_decoder)
    w = model.weights
    for index in range(50):
        v = random_decoder[index]
        centered = v - v.mean()
        normed = centered / np.sqrt((centered ** 2).mean() + 1e-5) * w["ln_final.w"] + w["ln_final.b"]
        scores = normed @ w["unembed.W_U"]
        order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
        top, bottom = vocab_projection_tokens(model, sae, _ref(sae, index), 5)
        assert [s.token_id for s in top] == order[:5]
        assert [s.token_id for s in bottom] == sorted(range(len(scores)), key=lambda i: (scores[i], i))[:5]
        assert not {s.token_id for s in top} & {s.token_id for s in bottom}
    logger.info("✓ vocabulary projection matches the dense sort oracle")


def test_vocab_projection_ignores_scale_and_shift(model, random_decoder):
    base = _sae_from_decoder(random_decoder)
    moved = _sae_from_decoder(2.5 * random_decoder + 0.75, sae_id="moved")
    for index in range(50):
        a_top, a_bottom = vocab_projection_tokens(model, base, _ref(base, index), 10)
        b_top, b_bottom = vocab_projection_tokens(model, moved, _ref(moved, index), 10)
        assert [s.token_id for s in a_top] == [s.token_id for s in b_top]
        assert [s.token_id for s in a_bottom] == [s.token_id for s in b_bottom]


def test_vocab_projection_variants_and_limits(model, registry, tokenizer):
    featurizer = registry.for_feature(CAT_FEATURE)
    top, _ = vocab_projection_tokens(model, featurizer, CAT_FEATURE, 2, tokenizer=tokenizer)
    assert [s.token_text for s in top] == ["cat", "cats"]
    for source in VocabSource:
        for target in VocabTarget:
            variant = VocabProjVariant(source=source, target=target)
            top, bottom = vocab_projection_tokens(model, featurizer, CAT_FEATURE, 3, variant)
            assert len(top) == len(bottom) == 3
    embed_top, _ = vocab_projection_tokens(
        model, featurizer, CAT_FEATURE, 2, VocabProjVariant(target=VocabTarget.EMBED), tokenizer,
    )
    assert {s.token_text for s in embed_top} == {"cat", "cats"}
    with pytest.raises(PreconditionError):
        vocab_projection_tokens(model, featurizer, CAT_FEATURE, TOY_CONFIG.vocab_size + 1)


# ── token change ────────────────────────────────────────────────────────────────

TOKEN_CHANGE_FEATURES = (
    [FeatureRef(model=TOY_MODEL_ID, site=RESID_0, featurizer="sae:toy", index=i) for i in range(8)]
    + [FeatureRef(model=TOY_MODEL_ID, site=RESID_1, featurizer="sae:toy_topk", index=i) for i in range(4)]
    + [FeatureRef(model=TOY_MODEL_ID, site=MLP_1, featurizer="sae:toy_jump", index=i) for i in range(4)]
    + [FeatureRef(model=TOY_MODEL_ID, site=MLP_1, featurizer="neuron", index=i) for i in range(4)]
)


def test_token_change_matches_two_forward_reference(model, registry, tokenizer):
    prompts = [tokenizer.encode("the dog"), tokenizer.encode("war!")]
    assert len(TOKEN_CHANGE_FEATURES) == 20
    for feature in TOKEN_CHANGE_FEATURES:
        featurizer = registry.for_feature(feature)
        deltas = token_change_deltas(model, featurizer, feature, prompts, 2.0)
        clamp = Intervention(feature.site, featurizer, feature.index, 2.0)
        expected = np.zeros(TOY_CONFIG.vocab_size)
        for prompt in prompts:
            clamped = model.forward([prompt], intervention=clamp).row_logits()
            expected += (clamped - model.forward([prompt]).row_logits()).sum(axis=0)
        expected /= sum(len(p) for p in prompts)
        np.testing.assert_allclose(deltas, expected, atol=1e-5, err_msg=feature.key)


def test_token_change_is_zero_without_a_direction(model, tokenizer):
    sae = SaeFeaturizer(
        "null", RESID_1, np.ones((TOY_CONFIG.d_model, 1)), np.zeros(1),
        np.zeros((1, TOY_CONFIG.d_model)), np.zeros(TOY_CONFIG.d_model),
    )
    prompts = [tokenizer.encode("the cat sat"), tokenizer.encode("honestly")]
    deltas = token_change_deltas(model, sae, _ref(sae, 0), prompts, 50.0)
    assert np.all(deltas == 0.0)


def test_token_change_identity_clamp(model, registry, tokenizer):
    featurizer = registry.for_feature(ZEBRA_FEATURE)
    deltas = token_change_deltas(model, featurizer, ZEBRA_FEATURE, [tokenizer.encode("the dog ran")], 0.0)
    assert np.all(deltas == 0.0)


def test_token_change_promotes_cat(model, registry, tokenizer):
    featurizer = registry.for_feature(CAT_FEATURE)
    prompts = [tokenizer.encode("the dog ran to the park.")]
    top, bottom = token_change_scores(model, featurizer, CAT_FEATURE, prompts, 20.0, 3, tokenizer)
    assert top[0].token_text in ("cat", "cats")
    assert top[0].score > 0 > bottom[0].score
    with pytest.raises(PreconditionError):
        token_change_scores(model, featurizer, CAT_FEATURE, [], 5.0, 3)


def test_token_change_prompts_are_seeded(sequences, tokenizer):
    a = sample_token_change_prompts(sequences, 8, 6, tokenizer.bos_id, seed=3)
    assert a == sample_token_change_prompts(sequences, 8, 6, tokenizer.bos_id, seed=3)
    assert len(a) == 8
    assert all(p[0] == tokenizer.bos_id and len(p) <= 7 for p in a)


# ── explainer calls ─────────────────────────────────────────────────────────────

@pytest.fixture(scope="module")
def cat_summary(model, registry, sequences):
    return build_index(model, registry, [CAT_FEATURE], sequences, IndexConfig(window=64)).get(CAT_FEATURE)


def test_describe_maxact(gateway, cat_summary, tokenizer):
    description = describe_maxact(gateway, cat_summary, tokenizer)
    assert "cat" in description.text
    assert description.method.kind is MethodKind.MAXACT
    assert description.evidence[0].records[0].doc_id == "doc-000"
    assert description.llm.model == "mock-explainer"
    again = describe_maxact(gateway, cat_summary, tokenizer)
    assert again.model_dump_json() == description.model_dump_json()
    with pytest.raises(PreconditionError):
        describe_maxact(gateway, cat_summary.model_copy(update={"top_records": []}), tokenizer)


def test_describe_token_lists(gateway):
    top = _scores(["war", "battle", "troops"], [5.0, 4.0, 3.0])
    bottom = _scores(["cat", "dog", "tea"], [-3.0, -2.0, -1.0])
    for describe in (describe_vocabproj, describe_tokenchange):
        description = describe(gateway, CAT_FEATURE, top, bottom)
        assert "war" in description.text
        assert describe(gateway, CAT_FEATURE, top, bottom).text == description.text
        with pytest.raises(PreconditionError):
            describe(gateway, CAT_FEATURE, [], [])


def test_ensemble_raw_uses_every_section(gateway, cat_summary, tokenizer):
    maxact = maxact_evidence(cat_summary, tokenizer)
    vocabproj = token_list_evidence(BaseMethod.VOCABPROJ, _scores(["war", "battle"], [5.0, 4.0]), [])
    description = ensemble_raw(gateway, CAT_FEATURE, [maxact, vocabproj])
    assert "cat" in description.text and "war" in description.text
    assert description.method.members == (BaseMethod.MAXACT, BaseMethod.VOCABPROJ)
    swapped = ensemble_raw(gateway, CAT_FEATURE, [vocabproj, maxact])
    assert swapped.llm.prompt_hash == description.llm.prompt_hash
    with pytest.raises(PreconditionError):
        ensemble_raw(gateway, CAT_FEATURE, [maxact])


def _description(feature, method, text):
    evidence = token_list_evidence(BaseMethod(method.value), _scores(["x"], [1.0]), [])
    return Description(feature=feature, method=MethodSpec.single(method), text=text, evidence=[evidence])


def test_ensemble_concat():
    a = _description(CAT_FEATURE, BaseMethod.MAXACT, "A")
    b = _description(CAT_FEATURE, BaseMethod.VOCABPROJ, "B")
    assert ensemble_concat([a, b]).text == "A; B"
    x = _description(CAT_FEATURE, BaseMethod.MAXACT, "x")
    y = _description(CAT_FEATURE, BaseMethod.VOCABPROJ, "y")
    z = _description(CAT_FEATURE, BaseMethod.TOKENCHANGE, "z")
    for order in ([x, z, y], [z, y, x], [y, x, z]):
        combined = ensemble_concat(order)
        assert combined.text == "x; y; z"
        assert combined.llm is None and combined.evidence == []
    with pytest.raises(PreconditionError):
        ensemble_concat([a, _description(ZEBRA_FEATURE, BaseMethod.VOCABPROJ, "B")])
    with pytest.raises(PreconditionError):
        ensemble_concat([a])


def _controller(model, tokenizer, registry, gateway, sequences, index=None):
    params = MethodParams(t_vocabproj=10, t_tokenchange=5, k_prompts=4, prompt_len=6)
    return DescribeController(
        model, tokenizer, registry, gateway, params, EvalConfig(), sequences=sequences, index=index,
    )


def test_controller_describes_every_method(model, tokenizer, registry, gateway, sequences):
    index = build_index(model, registry, [CAT_FEATURE], sequences, IndexConfig(window=64))
    controller = _controller(model, tokenizer, registry, gateway, sequences, index)
    methods = [MethodSpec.parse(m) for m in ("ensemble_concat:all", "vocabproj", "maxact", "tokenchange", "ensemble_raw:all")]
    descriptions = controller.describe(CAT_FEATURE, methods)
    assert [d.method.label for d in descriptions] == [
        "maxact", "vocabproj", "tokenchange",
        "ensemble_raw:maxact+vocabproj+tokenchange", "ensemble_concat:maxact+vocabproj+tokenchange",
    ]
    assert descriptions[-1].text == "; ".join(d.text for d in descriptions[:3])
    assert all("cat" in descriptions[i].text for i in (0, 1, 3, 4))
    tokenchange = descriptions[2].evidence[0]
    assert tokenchange.clamp_value is not None and tokenchange.clamp_value > 0


def test_concat_without_members_is_a_dependency_error(model, tokenizer, registry, gateway, sequences):
    controller = _controller(model, tokenizer, registry, gateway, sequences)
    with pytest.raises(DependencyError):
        controller.describe(CAT_FEATURE, [MethodSpec.parse("ensemble_concat:vocabproj+tokenchange")])
    existing = controller.describe(CAT_FEATURE, [MethodSpec.parse("vocabproj"), MethodSpec.parse("tokenchange")])
    combined = controller.describe(
        CAT_FEATURE, [MethodSpec.parse("ensemble_concat:vocabproj+tokenchange")], existing=existing,
    )
    assert combined[0].text == f"{existing[0].text}; {existing[1].text}"


def test_maxact_needs_an_index(model, tokenizer, registry, gateway, sequences):
    controller = _controller(model, tokenizer, registry, gateway, sequences)
    with pytest.raises(PreconditionError):
        controller.describe(CAT_FEATURE, [MethodSpec.parse("maxact")])
