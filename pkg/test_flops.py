"""FLOPs estimator tests: hand arithmetic and the published MaxAct magnitude."""

import pytest

from featdesc.models import BaseMethod, CostModel, MethodSpec
from featdesc.utility.flops import TOKENCHANGE_NOTE, base_method_flops, estimate_flops


@pytest.fixture
def gemma_like():
    return CostModel(
        n_nonembed_params=2.03e9, corpus_tokens=25_000 * 128, feature_count=16_384, d_model=2304, vocab_size=256_000,
    )


def test_maxact_matches_the_published_magnitude(gemma_like):
    estimate = estimate_flops(gemma_like, MethodSpec.parse("maxact"))
    assert estimate.flops == pytest.approx(3.9e16, rel=0.05)
    assert estimate.note is None


def test_empty_corpus_costs_nothing_for_maxact(gemma_like):
    empty = gemma_like.model_copy(update={"corpus_tokens": 0})
    assert base_method_flops(empty, BaseMethod.MAXACT) == 0.0


def test_hand_arithmetic():
    cost = CostModel(n_nonembed_params=100, corpus_tokens=10, feature_count=3, d_model=4, vocab_size=5)
    assert base_method_flops(cost, BaseMethod.MAXACT) == 6 * 100 * 10
    assert base_method_flops(cost, BaseMethod.VOCABPROJ) == 2 * 5 * 4 * 3
    assert base_method_flops(cost, BaseMethod.TOKENCHANGE, k_prompts=2, prompt_len=7) == 6 * 100 * (2 * 2 * 7) * 3


def test_ensembles_sum_their_members(gemma_like):
    members = {m: base_method_flops(gemma_like, m) for m in BaseMethod}
    raw = estimate_flops(gemma_like, MethodSpec.parse("ensemble_raw:all"))
    assert raw.flops == pytest.approx(sum(members.values()))
    assert raw.note == TOKENCHANGE_NOTE
    concat = estimate_flops(gemma_like, MethodSpec.parse("ensemble_concat:maxact+vocabproj"))
    assert concat.flops == pytest.approx(members[BaseMethod.MAXACT] + members[BaseMethod.VOCABPROJ])
    assert concat.method == "ensemble_concat:maxact+vocabproj"
    assert concat.note is None
