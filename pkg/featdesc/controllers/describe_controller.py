"""
Description methods. Evidence is computed here; the text itself always comes
from the explainer role of the LLM gateway (EnsembleConcat excepted).
"""

import logging
from typing import Optional, Sequence

import numpy as np

from featdesc.agents.llm import LLMGateway
from featdesc.agents.prompts import (
    ENSEMBLE_TEMPLATE,
    EXPLAINER_TEMPLATES,
    PromptLibrary,
    render_evidence,
    render_evidence_sections,
)
from featdesc.agents.schemas import ChatRequest
from featdesc.controllers.eval_controller import calibrate_clamp
from featdesc.controllers.index_controller import ActivationIndex, CorpusSequence
from featdesc.db_utility.jsonl_store import RunClock
from featdesc.engine.tokenizer import Tokenizer
from featdesc.engine.transformer import Intervention, Model
from featdesc.exceptions import DependencyError, PreconditionError
from featdesc.featurizers.featurizer import Featurizer
from featdesc.featurizers.registry import FeaturizerRegistry
from featdesc.models import (
    ActivationRecord,
    BaseMethod,
    Description,
    EvalConfig,
    Evidence,
    FeatureActivationSummary,
    FeatureRef,
    HookKind,
    LLMFingerprint,
    MethodKind,
    MethodParams,
    MethodSpec,
    RenderedRecord,
    RoleClass,
    Sign,
    TokenScore,
    VocabProjVariant,
    VocabTarget,
)
from featdesc.utility.seeding import rng_for

logger = logging.getLogger(__name__)

CONCAT_SEPARATOR = "; "


# ── evidence ────────────────────────────────────────────────────────────────────

def rank_tokens(scores: np.ndarray, t: int, tokenizer: Optional[Tokenizer] = None) -> tuple[list[TokenScore], list[TokenScore]]:
    """Top t descending and bottom t ascending; ties go to the lower token id."""
    vocab = len(scores)
    if t < 1:
        raise PreconditionError("t must be at least 1")
    if t > vocab:
        raise PreconditionError(f"t={t} exceeds the vocabulary size {vocab}")
    ids = np.arange(vocab)
    top = np.lexsort((ids, -scores))[:t]
    bottom = np.lexsort((ids, scores))[:t]

    def as_scores(order):
        return [
            TokenScore(
                token_id=int(i),
                token_text=tokenizer.token_text(int(i)) if tokenizer else str(int(i)),
                score=float(scores[i]),
            )
            for i in order
        ]

    return as_scores(top), as_scores(bottom)


def vocab_projection_scores(
    model: Model,
    featurizer: Featurizer,
    feature: FeatureRef,
    variant: VocabProjVariant = VocabProjVariant(),
) -> np.ndarray:
    direction = featurizer.feature_vector(feature.index, variant.source)
    if feature.site.kind is HookKind.MLP_HIDDEN:
        # MLP-space directions enter the residual stream through W_out
        direction = direction @ model.weights[f"blocks.{feature.site.layer}.mlp.W_out"]
    normed = model.final_ln(direction)
    target = model.W_U if variant.target is VocabTarget.UNEMBED else model.W_E.T
    return normed @ target


def vocab_projection_tokens(
    model: Model,
    featurizer: Featurizer,
    feature: FeatureRef,
    t: int,
    variant: VocabProjVariant = VocabProjVariant(),
    tokenizer: Optional[Tokenizer] = None,
) -> tuple[list[TokenScore], list[TokenScore]]:
    """Final layer norm of the feature direction projected onto the vocabulary."""
    if t > model.config.vocab_size:
        raise PreconditionError(f"t={t} exceeds the vocabulary size {model.config.vocab_size}")
    featurizer.check_index(feature.index)
    return rank_tokens(vocab_projection_scores(model, featurizer, feature, variant), t, tokenizer)


def sample_token_change_prompts(
    sequences: Sequence[CorpusSequence],
    k: int,
    length: int,
    bos_id: int,
    seed: int,
) -> list[list[int]]:
    """k seeded windows of `length` corpus tokens, each prefixed with BOS."""
    if not sequences:
        raise PreconditionError("No corpus sequences to draw prompts from")
    rng = rng_for(seed, "tokenchange-prompts")
    bodies = [s.tokens[1:] for s in sequences if len(s.tokens) > 1]
    prompts = []
    for _ in range(k):
        body = bodies[int(rng.integers(len(bodies)))]
        if len(body) <= length:
            window = body
        else:
            start = int(rng.integers(len(body) - length + 1))
            window = body[start:start + length]
        prompts.append([bos_id, *window])
    return prompts


def token_change_deltas(
    model: Model,
    featurizer: Featurizer,
    feature: FeatureRef,
    prompts: Sequence[Sequence[int]],
    m: float,
) -> np.ndarray:
    """Mean (clamped - baseline) logit per vocabulary token over every position of every prompt."""
    if not prompts:
        raise PreconditionError("token change needs at least one prompt")
    intervention = Intervention(feature.site, featurizer, feature.index, float(m))
    baseline = model.forward(prompts)
    clamped = model.forward(prompts, intervention=intervention)
    total = np.zeros(model.config.vocab_size)
    positions = 0
    for row, n in enumerate(baseline.lengths):
        total += (clamped.logits[row, :n] - baseline.logits[row, :n]).sum(axis=0)
        positions += n
    return total / positions


def token_change_scores(
    model: Model,
    featurizer: Featurizer,
    feature: FeatureRef,
    prompts: Sequence[Sequence[int]],
    m: float,
    t: int,
    tokenizer: Optional[Tokenizer] = None,
) -> tuple[list[TokenScore], list[TokenScore]]:
    if t > model.config.vocab_size:
        raise PreconditionError(f"t={t} exceeds the vocabulary size {model.config.vocab_size}")
    deltas = token_change_deltas(model, featurizer, feature, prompts, m)
    return rank_tokens(deltas, t, tokenizer)


def render_record(record: ActivationRecord, tokenizer: Tokenizer) -> RenderedRecord:
    return RenderedRecord(
        doc_id=record.doc_id,
        tokens=[tokenizer.token_text(t) for t in record.tokens],
        activations=record.activations,
        max_activation=record.max_activation,
    )


def maxact_evidence(summary: FeatureActivationSummary, tokenizer: Tokenizer, n_top: int = 5) -> Evidence:
    if not summary.top_records:
        raise PreconditionError(f"{summary.feature.key} has no activating records")
    top = sorted(summary.top_records, key=ActivationRecord.sort_key)[:n_top]
    return Evidence(
        method=BaseMethod.MAXACT,
        records=[render_record(r, tokenizer) for r in top],
        quantile_records=[render_record(r, tokenizer) for r in summary.quantile_records],
    )


def token_list_evidence(
    method: BaseMethod,
    top: Sequence[TokenScore],
    bottom: Sequence[TokenScore],
    clamp_value: Optional[float] = None,
) -> Evidence:
    if not top and not bottom:
        raise PreconditionError(f"{method.value} evidence needs at least one token")
    return Evidence(method=method, promoted=list(top), suppressed=list(bottom), clamp_value=clamp_value)


# ── explainer calls ─────────────────────────────────────────────────────────────

def _explain(
    gateway: LLMGateway,
    feature: FeatureRef,
    method: MethodSpec,
    evidence: list[Evidence],
    template: str,
    prompts: PromptLibrary,
    clock: RunClock,
) -> Description:
    rendered = render_evidence_sections(evidence) if len(evidence) > 1 else render_evidence(evidence[0])
    request = ChatRequest.for_role(RoleClass.EXPLAINER, prompts.render(template, evidence=rendered))
    text = gateway.complete(request).strip()
    logger.debug(f"{feature.key} [{method.label}]: {text[:80]}")
    return Description(
        feature=feature,
        method=method,
        text=text,
        evidence=sorted(evidence, key=lambda e: e.method.rank),
        llm=LLMFingerprint(
            model=gateway.model_name(RoleClass.EXPLAINER),
            prompt_hash=request.prompt_hash,
            template_version=prompts.version(template),
        ),
        created_at=clock.now(),
    )


def describe_maxact(
    gateway: LLMGateway,
    summary: FeatureActivationSummary,
    tokenizer: Tokenizer,
    n_top: int = 5,
    prompts: Optional[PromptLibrary] = None,
    clock: Optional[RunClock] = None,
) -> Description:
    evidence = maxact_evidence(summary, tokenizer, n_top)
    return _explain(
        gateway, summary.feature, MethodSpec.single(BaseMethod.MAXACT), [evidence],
        EXPLAINER_TEMPLATES[BaseMethod.MAXACT], prompts or PromptLibrary(), clock or RunClock(),
    )


def describe_vocabproj(
    gateway: LLMGateway,
    feature: FeatureRef,
    top: Sequence[TokenScore],
    bottom: Sequence[TokenScore],
    prompts: Optional[PromptLibrary] = None,
    clock: Optional[RunClock] = None,
) -> Description:
    evidence = token_list_evidence(BaseMethod.VOCABPROJ, top, bottom)
    return _explain(
        gateway, feature, MethodSpec.single(BaseMethod.VOCABPROJ), [evidence],
        EXPLAINER_TEMPLATES[BaseMethod.VOCABPROJ], prompts or PromptLibrary(), clock or RunClock(),
    )


def describe_tokenchange(
    gateway: LLMGateway,
    feature: FeatureRef,
    top: Sequence[TokenScore],
    bottom: Sequence[TokenScore],
    clamp_value: Optional[float] = None,
    prompts: Optional[PromptLibrary] = None,
    clock: Optional[RunClock] = None,
) -> Description:
    evidence = token_list_evidence(BaseMethod.TOKENCHANGE, top, bottom, clamp_value)
    return _explain(
        gateway, feature, MethodSpec.single(BaseMethod.TOKENCHANGE), [evidence],
        EXPLAINER_TEMPLATES[BaseMethod.TOKENCHANGE], prompts or PromptLibrary(), clock or RunClock(),
    )


def ensemble_raw(
    gateway: LLMGateway,
    feature: FeatureRef,
    evidence: Sequence[Evidence],
    prompts: Optional[PromptLibrary] = None,
    clock: Optional[RunClock] = None,
) -> Description:
    """One explainer call over every member's raw evidence, sections in canonical method order."""
    members = {e.method for e in evidence}
    if len(members) < 2 or len(members) != len(evidence):
        raise PreconditionError("ensemble_raw needs evidence from at least two distinct methods")
    method = MethodSpec(kind=MethodKind.ENSEMBLE_RAW, members=members)
    template = ENSEMBLE_TEMPLATE if BaseMethod.MAXACT in members else EXPLAINER_TEMPLATES[BaseMethod.VOCABPROJ]
    return _explain(
        gateway, feature, method, list(evidence), template, prompts or PromptLibrary(), clock or RunClock(),
    )


def ensemble_concat(descriptions: Sequence[Description], clock: Optional[RunClock] = None) -> Description:
    if len(descriptions) < 2:
        raise PreconditionError("ensemble_concat needs at least two descriptions")
    features = {d.feature.key for d in descriptions}
    if len(features) != 1:
        raise PreconditionError(f"ensemble_concat got descriptions of different features: {sorted(features)}")
    bases = [d.method.base for d in descriptions]
    if None in bases or len(set(bases)) != len(bases):
        raise PreconditionError("ensemble_concat members must be distinct base methods")
    ordered = sorted(descriptions, key=lambda d: d.method.base.rank)
    return Description(
        feature=descriptions[0].feature,
        method=MethodSpec(kind=MethodKind.ENSEMBLE_CONCAT, members=bases),
        text=CONCAT_SEPARATOR.join(d.text for d in ordered),
        created_at=(clock or RunClock()).now(),
    )


# ── controller ──────────────────────────────────────────────────────────────────

class DescribeController:
    """
    Produces descriptions for one feature under any set of methods. Base
    evidence and base descriptions are computed at most once per feature and
    shared by the ensembles that need them.
    """

    def __init__(
        self,
        model: Model,
        tokenizer: Tokenizer,
        registry: FeaturizerRegistry,
        gateway: LLMGateway,
        params: MethodParams,
        eval_config: EvalConfig,
        sequences: Sequence[CorpusSequence] = (),
        index: Optional[ActivationIndex] = None,
        prompts: Optional[PromptLibrary] = None,
        clock: Optional[RunClock] = None,
        seed: int = 0,
    ):
        self.model = model
        self.tokenizer = tokenizer
        self.registry = registry
        self.gateway = gateway
        self.params = params
        self.eval_config = eval_config
        self.sequences = list(sequences)
        self.index = index
        self.prompts = prompts or PromptLibrary()
        self.clock = clock or RunClock()
        self.seed = seed
        self._token_change_prompts: Optional[list[list[int]]] = None

    def token_change_prompts(self) -> list[list[int]]:
        if self._token_change_prompts is None:
            self._token_change_prompts = sample_token_change_prompts(
                self.sequences, self.params.k_prompts, self.params.prompt_len, self.tokenizer.bos_id, self.seed,
            )
        return self._token_change_prompts

    def evidence(self, feature: FeatureRef, method: BaseMethod) -> Evidence:
        featurizer = self.registry.for_feature(feature)
        if method is BaseMethod.MAXACT:
            if self.index is None:
                raise PreconditionError("MaxAct needs an activation index; run `featdesc index` first")
            return maxact_evidence(self.index.get(feature), self.tokenizer, self.params.maxact_top)
        if method is BaseMethod.VOCABPROJ:
            top, bottom = vocab_projection_tokens(
                self.model, featurizer, feature, self.params.t_vocabproj,
                self.params.vocabproj_variant, self.tokenizer,
            )
            return token_list_evidence(method, top, bottom)
        prompts = [self.tokenizer.encode(p) for p in self.eval_config.open_ended_prompts]
        m = calibrate_clamp(
            self.model, featurizer, feature, prompts, self.params.tokenchange_kl_target, Sign.POSITIVE,
            tolerance=self.eval_config.calibration_tolerance,
            cap=self.eval_config.calibration_cap,
            max_iter=self.eval_config.calibration_max_iter,
        )
        top, bottom = token_change_scores(
            self.model, featurizer, feature, self.token_change_prompts(), m, self.params.t_tokenchange, self.tokenizer,
        )
        return token_list_evidence(method, top, bottom, clamp_value=m)

    def describe_base(self, feature: FeatureRef, method: BaseMethod, evidence: Optional[Evidence] = None) -> Description:
        evidence = evidence or self.evidence(feature, method)
        template = EXPLAINER_TEMPLATES[method]
        return _explain(self.gateway, feature, MethodSpec.single(method), [evidence], template, self.prompts, self.clock)

    def describe(
        self,
        feature: FeatureRef,
        methods: Sequence[MethodSpec],
        existing: Sequence[Description] = (),
    ) -> list[Description]:
        """
        Descriptions for every requested method, in canonical method order.
        EnsembleConcat members come from this call or from `existing` descriptions
        of the same feature; a missing member raises DependencyError.
        """
        methods = sorted(set(methods), key=MethodSpec.sort_key)
        requested = {spec.base for spec in methods if not spec.kind.is_ensemble}
        stored = {
            d.method.base: d for d in existing
            if d.feature.key == feature.key and not d.method.kind.is_ensemble
        }
        for spec in methods:
            if spec.kind is MethodKind.ENSEMBLE_CONCAT:
                missing = [m.value for m in spec.members if m not in requested and m not in stored]
                if missing:
                    raise DependencyError(
                        f"{spec.label} for {feature.key} needs existing {', '.join(missing)} descriptions"
                    )

        needed = set(requested)
        for spec in methods:
            if spec.kind is MethodKind.ENSEMBLE_RAW:
                needed.update(spec.members)
        evidence = {m: self.evidence(feature, m) for m in sorted(needed, key=lambda m: m.rank)}

        fresh: dict[BaseMethod, Description] = {}
        out = []
        for spec in methods:
            if spec.kind is MethodKind.ENSEMBLE_RAW:
                out.append(ensemble_raw(
                    self.gateway, feature, [evidence[m] for m in spec.members], self.prompts, self.clock,
                ))
            elif spec.kind is MethodKind.ENSEMBLE_CONCAT:
                members = [fresh.get(m) or stored[m] for m in spec.members]
                out.append(ensemble_concat(members, self.clock))
            else:
                fresh[spec.base] = self.describe_base(feature, spec.base, evidence[spec.base])
                out.append(fresh[spec.base])
        return out
