"""
Revival tests: candidate plans, witness search on the marker features and the
summary report.
"""

import logging
import re

import numpy as np
import pytest

from featdesc.agents import mock_llm
from featdesc.agents.llm import LLMGateway
from featdesc.agents.prompts import ACTIVATING_TAG, NEUTRAL_TAG, parse_sentence_sets
from featdesc.controllers.describe_controller import DescribeController, token_list_evidence
from featdesc.controllers.revival_controller import (
    RevivalController,
    build_revival_plan,
    candidate_activations,
    combo_prompts,
    interleave,
    revival_report,
    revive,
    token_pool,
)
from featdesc.engine.fixtures import TOY_CONFIG, TOY_MODEL_ID
from featdesc.exceptions import ParseError, PreconditionError
from featdesc.featurizers.featurizer import SaeFeaturizer
from featdesc.models import (
    BaseMethod,
    EvalConfig,
    Evidence,
    FeatureRef,
    GatewayConfig,
    MethodParams,
    RevivalConfig,
    RevivalResult,
    RevivalSchedule,
    RoleClass,
    TokenScore,
)

from conftest import CAT_FEATURE, MLP_1, RESID_0, ZEBRA_FEATURE

logger = logging.getLogger(__name__)


def _evidence(method, tokenizer, promoted, suppressed=()):
    def scores(words, sign):
        return [
            TokenScore(token_id=tokenizer.spec.vocab[w], token_text=w, score=sign * (len(words) - i))
            for i, w in enumerate(words)
        ]
    return token_list_evidence(method, scores(promoted, 1.0), scores(suppressed, -1.0))


@pytest.fixture
def war_evidence(tokenizer):
    return (
        _evidence(BaseMethod.VOCABPROJ, tokenizer, ["war", "battle", "troops"], ["tea"]),
        _evidence(BaseMethod.TOKENCHANGE, tokenizer, ["battle", "dog"]),
    )


def test_token_pool_keeps_first_occurrence_order(war_evidence, tokenizer):
    pool = token_pool(war_evidence)
    assert [tokenizer.token_text(t) for t in pool] == ["war", "battle", "troops", "tea", "dog"]
    assert len(pool) == len(set(pool)) == 5


def test_plan_counts_and_order(war_evidence, tokenizer):
    config = RevivalConfig(n_sentences=0)
    plan = build_revival_plan(None, ZEBRA_FEATURE, *war_evidence, tokenizer.bos_id, config, seed=0)
    assert len(plan.combo_prompts) == 5 + 1050
    assert [c.length for c in plan.combo_prompts[:5]] == [1] * 5
    lengths = [c.length for c in plan.combo_prompts[5:]]
    assert lengths == sorted(lengths)
    for length, count in config.schedule.counts.items():
        assert lengths.count(length) == count
    assert all(c.tokens[0] == tokenizer.bos_id and len(c.tokens) == c.length + 1 for c in plan.combo_prompts)
    assert all(set(c.tokens[1:]) <= set(plan.token_pool) for c in plan.combo_prompts)
    assert plan.degraded and plan.llm_sentences == []


def test_plan_is_seeded(war_evidence, tokenizer):
    config = RevivalConfig(n_sentences=0)
    a = build_revival_plan(None, ZEBRA_FEATURE, *war_evidence, tokenizer.bos_id, config, seed=4)
    b = build_revival_plan(None, ZEBRA_FEATURE, *war_evidence, tokenizer.bos_id, config, seed=4)
    c = build_revival_plan(None, ZEBRA_FEATURE, *war_evidence, tokenizer.bos_id, config, seed=5)
    assert a.model_dump_json() == b.model_dump_json()
    assert a.combo_prompts != c.combo_prompts


def test_empty_pool_has_no_combinations(tokenizer):
    assert combo_prompts([], {2: 10}, tokenizer.bos_id, 0, ZEBRA_FEATURE.key) == []
    empty_vocab = Evidence(method=BaseMethod.VOCABPROJ)
    empty_change = Evidence(method=BaseMethod.TOKENCHANGE)
    plan = build_revival_plan(None, ZEBRA_FEATURE, empty_vocab, empty_change, tokenizer.bos_id, RevivalConfig(), seed=0)
    assert plan.token_pool == [] and plan.n_candidates == 0


def test_plan_rejects_swapped_evidence(war_evidence, tokenizer):
    with pytest.raises(PreconditionError):
        build_revival_plan(None, ZEBRA_FEATURE, war_evidence[1], war_evidence[0], tokenizer.bos_id, RevivalConfig(), 0)


def test_plan_collects_generated_sentences(war_evidence, tokenizer, gateway):
    config = RevivalConfig(n_sentences=20, schedule=RevivalSchedule(counts={2: 3}))
    plan = build_revival_plan(gateway, ZEBRA_FEATURE, *war_evidence, tokenizer.bos_id, config, seed=0)
    assert not plan.degraded
    assert 0 < len(plan.llm_sentences) <= 150
    assert len(plan.llm_sentences) == len(set(plan.llm_sentences))
    assert any("war" in s for s in plan.llm_sentences)
    assert plan.n_candidates == 5 + 3 + len(plan.llm_sentences)


class _BrokenSentences:
    transport = "mock"
    calls = 0

    def model_name(self, role) -> str:
        return "broken"

    def send(self, request) -> str:
        return "nothing useful"


def test_failed_sentence_generation_degrades_the_plan(war_evidence, tokenizer):
    gateway = LLMGateway(GatewayConfig(backend="mock"), backend=_BrokenSentences())
    plan = build_revival_plan(gateway, ZEBRA_FEATURE, *war_evidence, tokenizer.bos_id, RevivalConfig(), seed=0)
    assert plan.degraded
    assert plan.llm_sentences == []
    assert len(plan.combo_prompts) == 5 + 1050


class _DistinctSentences:
    """Explains like the mock and writes `n` distinct activating sentences with no neutral block."""

    transport = "mock"
    calls = 0

    def model_name(self, role) -> str:
        return "distinct"

    def send(self, request) -> str:
        if request.role_class is RoleClass.EXPLAINER:
            return mock_llm.explain(request)
        text = next(m.content for m in request.messages if m.role == "user")
        n = int(re.search(r"sentences per set:\s*(\d+)", text).group(1))
        word = mock_llm.first_content_word(re.search(r"^Description:\s*(.*)$", text, re.MULTILINE).group(1))
        return "\n".join([ACTIVATING_TAG, *(f"{i}. the {word} story number {i}" for i in range(1, n + 1))])


def test_sentences_come_from_both_descriptions(tokenizer):
    vocabproj = _evidence(BaseMethod.VOCABPROJ, tokenizer, ["war", "battle", "troops"], ["tea"])
    tokenchange = _evidence(BaseMethod.TOKENCHANGE, tokenizer, ["dog", "cat"])
    gateway = LLMGateway(GatewayConfig(backend="mock"), backend=_DistinctSentences())
    config = RevivalConfig(n_sentences=150, schedule=RevivalSchedule(counts={2: 3}))
    plan = build_revival_plan(gateway, ZEBRA_FEATURE, vocabproj, tokenchange, tokenizer.bos_id, config, seed=0)
    assert not plan.degraded
    assert len(plan.llm_sentences) == 150
    war = [s for s in plan.llm_sentences if " war " in s]
    dog = [s for s in plan.llm_sentences if " dog " in s]
    assert len(war) == len(dog) == 75
    assert plan.llm_sentences[:2] == ["the war story number 1", "the dog story number 1"]


def test_interleave_dedupes_and_stops_at_the_limit():
    assert interleave([["a", "b", "c"], ["a", "x"]], 10) == ["a", "b", "x", "c"]
    assert interleave([["a", "b"], ["x", "y"]], 3) == ["a", "x", "b"]
    assert interleave([], 5) == []


def test_revival_parsing_tolerates_a_missing_neutral_block():
    text = f"{ACTIVATING_TAG}\n1. one\n2. two\n3. three"
    activating, neutral = parse_sentence_sets(text, 2, require_neutral=False)
    assert activating == ["one", "two"] and neutral == []
    with pytest.raises(ParseError):
        parse_sentence_sets(text, 3)
    with pytest.raises(ParseError):
        parse_sentence_sets(f"{ACTIVATING_TAG}\n{NEUTRAL_TAG}\n1. calm", 3, require_neutral=False)


@pytest.fixture
def controller(model, tokenizer, registry, gateway, sequences):
    params = MethodParams(t_vocabproj=10, t_tokenchange=5, k_prompts=4, prompt_len=6)
    describer = DescribeController(model, tokenizer, registry, gateway, params, EvalConfig(), sequences=sequences)
    return RevivalController(describer, RevivalConfig(n_sentences=5), seed=0)


def test_dead_marker_is_revived_by_its_own_token(controller, model, tokenizer, registry):
    result = controller.revive(ZEBRA_FEATURE)
    assert result.activated
    assert result.witness_kind == "single"
    assert result.witness == "zebra"
    assert result.candidates_tried == 1
    replay = candidate_activations(model, registry.for_feature(ZEBRA_FEATURE), ZEBRA_FEATURE, [result.witness_tokens])
    assert abs(replay[0] - result.witness_activation) <= 1e-6
    assert result.witness_activation == pytest.approx(9.0)
    logger.info("✓ dead marker feature revived")


def test_revival_is_deterministic(controller):
    first = controller.revive(ZEBRA_FEATURE)
    assert controller.revive(ZEBRA_FEATURE).model_dump_json() == first.model_dump_json()


def test_feature_without_encoder_stays_dead(model, tokenizer, war_evidence, gateway):
    d = TOY_CONFIG.d_model
    sae = SaeFeaturizer("silent", RESID_0, np.zeros((d, 1)), np.full(1, -1.0), np.ones((1, d)), np.zeros(d))
    feature = FeatureRef(model=TOY_MODEL_ID, site=RESID_0, featurizer=sae.name, index=0)
    config = RevivalConfig(n_sentences=5, schedule=RevivalSchedule(counts={2: 20, 12: 10}))
    plan = build_revival_plan(gateway, feature, *war_evidence, tokenizer.bos_id, config, seed=0)
    result = revive(model, tokenizer, sae, feature, plan, batch_size=7)
    assert not result.activated
    assert result.witness is None
    assert result.candidates_tried == plan.n_candidates


def test_plan_for_another_feature_is_rejected(model, tokenizer, registry, war_evidence):
    plan = build_revival_plan(None, ZEBRA_FEATURE, *war_evidence, tokenizer.bos_id, RevivalConfig(), seed=0)
    with pytest.raises(PreconditionError):
        revive(model, tokenizer, registry.for_feature(CAT_FEATURE), CAT_FEATURE, plan)


def test_revival_report():
    jump = FeatureRef(model=TOY_MODEL_ID, site=MLP_1, featurizer="sae:toy_jump", index=2)
    results = [
        RevivalResult(feature=ZEBRA_FEATURE, activated=True, witness="zebra", witness_tokens=[0, 9],
                      witness_kind="single", witness_length=1, witness_activation=9.0, candidates_tried=1, seed=0),
        RevivalResult(feature=CAT_FEATURE, activated=True, witness="a b", witness_tokens=[0, 3, 4],
                      witness_kind="combo", witness_length=5, witness_activation=0.5, candidates_tried=40, seed=0),
        RevivalResult(feature=jump, activated=False, candidates_tried=1055, seed=0),
    ]
    report = revival_report(results)
    assert report["by_site_kind"]["resid_post"] == {"n": 2, "revived": 2, "rate": 1.0}
    assert report["by_site_kind"]["mlp_hidden"] == {"n": 1, "revived": 0, "rate": 0.0}
    assert report["witnesses"] == {"combo:5": 1, "single": 1}
    assert revival_report([]) == {"by_site_kind": {}, "witnesses": {}}
