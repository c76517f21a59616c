"""
Dead-feature revival: candidate prompts built from the feature's output-side
evidence (vocabulary projection and token change) are run through the model
until one of them activates the feature.
"""

import logging
import math
from itertools import zip_longest
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from featdesc.agents.llm import LLMGateway
from featdesc.agents.prompts import PromptLibrary
from featdesc.controllers.describe_controller import DescribeController, describe_tokenchange, describe_vocabproj
from featdesc.controllers.eval_controller import gen_eval_sentences
from featdesc.engine.tokenizer import Tokenizer
from featdesc.engine.transformer import Model
from featdesc.exceptions import FeatDescError, PreconditionError, TokenizationError
from featdesc.featurizers.featurizer import Featurizer
from featdesc.models import BaseMethod, ComboPrompt, Evidence, FeatureRef, RevivalConfig, RevivalPlan, RevivalResult
from featdesc.utility.seeding import rng_for

logger = logging.getLogger(__name__)

MAX_LLM_SENTENCES = 150


def token_pool(evidence: Sequence[Evidence]) -> list[int]:
    """Union of promoted and suppressed token ids, first occurrence order."""
    pool: list[int] = []
    seen = set()
    for ev in evidence:
        for score in [*ev.promoted, *ev.suppressed]:
            if score.token_id not in seen:
                seen.add(score.token_id)
                pool.append(score.token_id)
    return pool


def combo_prompts(pool: Sequence[int], counts: dict[int, int], bos_id: int, seed: int, feature_key: str) -> list[ComboPrompt]:
    """One single-token prompt per pool token, then the random combinations by increasing length."""
    if not pool:
        return []
    prompts = [ComboPrompt(length=1, tokens=[bos_id, int(t)]) for t in pool]
    rng = rng_for(seed, "revival", feature_key)
    pool_arr = np.asarray(pool, dtype=np.int64)
    for length in sorted(counts):
        for _ in range(counts[length]):
            picks = rng.choice(pool_arr, size=length, replace=True)
            prompts.append(ComboPrompt(length=length, tokens=[bos_id, *(int(t) for t in picks)]))
    return prompts


def interleave(lists: Sequence[Sequence[str]], limit: int) -> list[str]:
    """Round-robin over the lists, dropping repeats, until `limit` sentences are taken."""
    merged: list[str] = []
    seen = set()
    for group in zip_longest(*lists):
        for sentence in group:
            if sentence is None or sentence in seen:
                continue
            seen.add(sentence)
            merged.append(sentence)
            if len(merged) == limit:
                return merged
    return merged


def build_revival_plan(
    gateway: Optional[LLMGateway],
    feature: FeatureRef,
    vocabproj: Evidence,
    tokenchange: Evidence,
    bos_id: int,
    config: RevivalConfig,
    seed: int,
    prompts: Optional[PromptLibrary] = None,
) -> RevivalPlan:
    if vocabproj.method is not BaseMethod.VOCABPROJ or tokenchange.method is not BaseMethod.TOKENCHANGE:
        raise PreconditionError("Revival plans are built from vocabproj and tokenchange evidence")
    pool = token_pool([vocabproj, tokenchange])
    combos = combo_prompts(pool, config.schedule.counts, bos_id, seed, feature.key)

    sentences: list[str] = []
    degraded = gateway is None
    limit = min(config.n_sentences, MAX_LLM_SENTENCES)
    if gateway is not None and limit > 0:
        try:
            descriptions = []
            if not vocabproj.is_empty:
                descriptions.append(
                    describe_vocabproj(gateway, feature, vocabproj.promoted, vocabproj.suppressed, prompts)
                )
            if not tokenchange.is_empty:
                descriptions.append(describe_tokenchange(
                    gateway, feature, tokenchange.promoted, tokenchange.suppressed, tokenchange.clamp_value, prompts,
                ))
            if descriptions:
                per_description = math.ceil(limit / len(descriptions))
                generated = [
                    gen_eval_sentences(gateway, d.text, per_description, prompts, require_neutral=False)[0]
                    for d in descriptions
                ]
                sentences = interleave(generated, limit)
        except FeatDescError as e:
            logger.error(f"{feature.key}: sentence generation failed, plan uses token combinations only ({e})")
            degraded = True
    return RevivalPlan(
        feature=feature,
        token_pool=pool,
        llm_sentences=sentences,
        combo_prompts=combos,
        seed=seed,
        bos_id=bos_id,
        degraded=degraded,
    )


def _candidates(plan: RevivalPlan, tokenizer: Tokenizer, n_ctx: int) -> list[tuple[str, list[int], int]]:
    """(kind, tokens, length) in evaluation order."""
    out = [("single" if c.length == 1 else "combo", c.tokens[:n_ctx], c.length) for c in plan.combo_prompts]
    for sentence in plan.llm_sentences:
        try:
            tokens = tokenizer.encode(sentence)[:n_ctx]
        except TokenizationError as e:
            logger.debug(f"Skipping untokenizable sentence: {e}")
            continue
        out.append(("llm_sentence", tokens, len(tokens) - 1))
    return out


def candidate_activations(
    model: Model,
    featurizer: Featurizer,
    feature: FeatureRef,
    token_lists: Sequence[Sequence[int]],
) -> list[float]:
    """Max activation over non-BOS positions for each candidate."""
    out = model.forward(token_lists, capture=[feature.site])
    acts = featurizer.activation(out.captures[feature.site], feature.index)
    return [float(acts[i, 1:n].max()) if n > 1 else 0.0 for i, n in enumerate(out.lengths)]


def revive(
    model: Model,
    tokenizer: Tokenizer,
    featurizer: Featurizer,
    feature: FeatureRef,
    plan: RevivalPlan,
    batch_size: int = 64,
) -> RevivalResult:
    if plan.feature.key != feature.key:
        raise PreconditionError(f"Plan for {plan.feature.key} cannot revive {feature.key}")
    candidates = _candidates(plan, tokenizer, model.config.n_ctx)
    for start in range(0, len(candidates), batch_size):
        batch = candidates[start:start + batch_size]
        maxima = candidate_activations(model, featurizer, feature, [tokens for _, tokens, _ in batch])
        for offset, value in enumerate(maxima):
            if value > 0:
                kind, tokens, length = batch[offset]
                logger.info(f"{feature.key} revived by {kind} candidate #{start + offset + 1} ({value:.4f})")
                return RevivalResult(
                    feature=feature,
                    activated=True,
                    witness=tokenizer.decode(tokens),
                    witness_tokens=list(tokens),
                    witness_kind=kind,
                    witness_length=length,
                    witness_activation=value,
                    candidates_tried=start + offset + 1,
                    seed=plan.seed,
                    degraded=plan.degraded,
                )
    logger.info(f"{feature.key} stayed dead after {len(candidates)} candidates")
    return RevivalResult(
        feature=feature, activated=False, candidates_tried=len(candidates), seed=plan.seed, degraded=plan.degraded,
    )


def revival_report(results: Sequence[RevivalResult]) -> dict:
    """Fraction revived per hook-site kind and the witness-type breakdown."""
    if not results:
        return {"by_site_kind": {}, "witnesses": {}}
    frame = pd.DataFrame([
        {
            "site_kind": r.feature.site.kind.value,
            "activated": r.activated,
            "witness": (
                f"combo:{r.witness_length}" if r.witness_kind == "combo" else r.witness_kind
            ) if r.activated else None,
        }
        for r in results
    ])
    by_kind = frame.groupby("site_kind")["activated"].agg(["count", "sum"])
    witnesses = frame["witness"].dropna().value_counts().sort_index()
    return {
        "by_site_kind": {
            kind: {"n": int(row["count"]), "revived": int(row["sum"]), "rate": float(row["sum"]) / int(row["count"])}
            for kind, row in by_kind.iterrows()
        },
        "witnesses": {label: int(n) for label, n in witnesses.items()},
    }


class RevivalController:
    def __init__(self, describer: DescribeController, config: RevivalConfig, seed: int = 0):
        self.describer = describer
        self.config = config
        self.seed = seed

    def plan(self, feature: FeatureRef) -> RevivalPlan:
        vocabproj = self.describer.evidence(feature, BaseMethod.VOCABPROJ)
        try:
            tokenchange = self.describer.evidence(feature, BaseMethod.TOKENCHANGE)
        except FeatDescError as e:
            # a zero-direction feature cannot be calibrated; its pool comes from the projection alone
            logger.warning(f"{feature.key}: no token-change evidence ({e})")
            tokenchange = Evidence(method=BaseMethod.TOKENCHANGE)
        return build_revival_plan(
            self.describer.gateway, feature, vocabproj, tokenchange, self.describer.tokenizer.bos_id,
            self.config, self.seed, self.describer.prompts,
        )

    def revive(self, feature: FeatureRef) -> RevivalResult:
        plan = self.plan(feature)
        return revive(
            self.describer.model, self.describer.tokenizer, self.describer.registry.for_feature(feature),
            feature, plan, self.config.batch_size,
        )
