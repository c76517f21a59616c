"""
Input-based and output-based evaluation of feature descriptions.

Input metric: the sentence generator writes activating and neutral sentences
for a description; the description passes when the feature's mean
max-activation on the activating set is strictly higher.

Output metric: the target feature and two random distractors are clamped at
KL-calibrated strengths while generating from open-ended prompts; the judge
must pick the target's set from the description alone.
"""

import logging
import threading
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from featdesc.agents.llm import LLMGateway
from featdesc.agents.prompts import (
    JUDGE_TEMPLATE,
    SENTENCE_TEMPLATE,
    PromptLibrary,
    parse_judge_choice,
    parse_sentence_sets,
    render_sets,
)
from featdesc.agents.schemas import ChatRequest
from featdesc.controllers.index_controller import ActivationIndex
from featdesc.db_utility.jsonl_store import RunClock
from featdesc.engine.tokenizer import Tokenizer
from featdesc.engine.transformer import Intervention, Model, generate, kl_divergence, next_token_distributions
from featdesc.exceptions import CalibrationFailed, ParseError, PreconditionError
from featdesc.featurizers.featurizer import Featurizer
from featdesc.featurizers.registry import FeaturizerRegistry
from featdesc.models import (
    EvalConfig,
    EvalRecord,
    FeatureRef,
    InputEvalResult,
    MethodSummary,
    OutputEvalResult,
    RoleClass,
    SamplingConfig,
    SamplingMode,
    Sign,
    SteeredText,
    SteeredTextSet,
)
from featdesc.utility.seeding import derive_seed, rng_for
from featdesc.utility.stats import bootstrap_ci, normal_ci

logger = logging.getLogger(__name__)

GRID_POINTS = 256


# ── LLM-facing steps ────────────────────────────────────────────────────────────

def _complete_parsed(gateway: LLMGateway, request: ChatRequest, parse, max_reasks: int):
    response = ""
    for attempt in range(max_reasks + 1):
        response = gateway.complete(request)
        try:
            return parse(response)
        except ParseError as e:
            logger.warning(f"Unusable {request.role_class.value} answer (attempt {attempt + 1}): {e}")
            request = request.with_correction(response, str(e))
    raise ParseError(f"{request.role_class.value} answer still malformed after {max_reasks} re-asks: {response[:120]!r}")


def gen_eval_sentences(
    gateway: LLMGateway,
    description: str,
    n: int,
    prompts: Optional[PromptLibrary] = None,
    max_reasks: int = 2,
    require_neutral: bool = True,
) -> tuple[list[str], list[str]]:
    if n < 1:
        raise PreconditionError("Need at least one sentence per set")
    if not description.strip():
        raise PreconditionError("Cannot generate sentences for an empty description")
    prompts = prompts or PromptLibrary()
    request = ChatRequest.for_role(
        RoleClass.SENTENCE_GENERATOR, prompts.render(SENTENCE_TEMPLATE, description=description, n=n),
    )
    return _complete_parsed(
        gateway, request, lambda text: parse_sentence_sets(text, n, require_neutral), max_reasks,
    )


# ── input metric ────────────────────────────────────────────────────────────────

def sentence_max_activations(
    model: Model,
    tokenizer: Tokenizer,
    featurizer: Featurizer,
    feature: FeatureRef,
    sentences: Sequence[str],
) -> list[float]:
    """Max activation over token positions (BOS excluded) for each sentence."""
    if not sentences:
        return []
    token_lists = [tokenizer.encode(s)[: model.config.n_ctx] for s in sentences]
    out = model.forward(token_lists, capture=[feature.site])
    acts = featurizer.activation(out.captures[feature.site], feature.index)
    return [float(acts[i, 1:n].max()) if n > 1 else 0.0 for i, n in enumerate(out.lengths)]


def input_eval(
    model: Model,
    tokenizer: Tokenizer,
    featurizer: Featurizer,
    feature: FeatureRef,
    activating: Sequence[str],
    neutral: Sequence[str],
) -> InputEvalResult:
    if not activating or not neutral:
        raise PreconditionError("Both sentence sets must be non-empty")
    act_max = sentence_max_activations(model, tokenizer, featurizer, feature, activating)
    neu_max = sentence_max_activations(model, tokenizer, featurizer, feature, neutral)
    mean_act, mean_neu = float(np.mean(act_max)), float(np.mean(neu_max))
    return InputEvalResult(
        mean_activating=mean_act,
        mean_neutral=mean_neu,
        activating_max=act_max,
        neutral_max=neu_max,
        activating=list(activating),
        neutral=list(neutral),
        passed=mean_act > mean_neu,
    )


# ── clamp calibration ───────────────────────────────────────────────────────────

class _KLProbe:
    """Mean next-token KL(clamped || baseline) over the prompts as a function of m."""

    def __init__(self, model: Model, featurizer: Featurizer, feature: FeatureRef, prompts: Sequence[Sequence[int]]):
        if not prompts:
            raise PreconditionError("Calibration needs at least one prompt")
        self.model = model
        self.featurizer = featurizer
        self.feature = feature
        self.prompts = [list(p) for p in prompts]
        self.baseline = next_token_distributions(model, self.prompts)
        self.max_kl = 0.0
        self.evaluations = 0

    def __call__(self, m: float) -> float:
        intervention = Intervention(self.feature.site, self.featurizer, self.feature.index, float(m))
        clamped = next_token_distributions(self.model, self.prompts, intervention)
        kl = float(np.mean([kl_divergence(p, q) for p, q in zip(clamped, self.baseline)]))
        self.max_kl = max(self.max_kl, kl)
        self.evaluations += 1
        return kl


def calibrate_clamp(
    model: Model,
    featurizer: Featurizer,
    feature: FeatureRef,
    prompts: Sequence[Sequence[int]],
    target_kl: float,
    sign: Sign = Sign.POSITIVE,
    tolerance: float = 0.01,
    cap: float = 2.0 ** 16,
    max_iter: int = 60,
) -> float:
    """
    Finds m (with the requested sign) whose mean KL is within `tolerance` of
    `target_kl`: doubling bracket from |m| = 1 up to `cap`, bisection inside
    the bracket, then a grid scan if the bracket misses.
    """
    if target_kl <= 0:
        raise PreconditionError("target_kl must be positive")
    probe = _KLProbe(model, featurizer, feature, prompts)
    s = Sign(sign).factor

    def close(kl: float) -> bool:
        return abs(kl - target_kl) <= tolerance

    lo = 0.0
    if close(probe(0.0)):
        return 0.0
    hi = None
    magnitude = 1.0
    while magnitude <= cap:
        kl = probe(s * magnitude)
        if close(kl):
            return s * magnitude
        if kl > target_kl:
            hi = magnitude
            break
        lo = magnitude
        magnitude *= 2.0
    logger.debug(f"{feature.key} target {target_kl}{sign.value}: bracket [{lo}, {hi}]")

    if hi is not None:
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            kl = probe(s * mid)
            if close(kl):
                return s * mid
            if kl > target_kl:
                hi = mid
            else:
                lo = mid

    upper = hi if hi is not None else cap
    for magnitude in np.linspace(upper / GRID_POINTS, upper, GRID_POINTS):
        if close(probe(s * magnitude)):
            logger.debug(f"{feature.key}: grid scan found |m|={magnitude:.4f}")
            return s * float(magnitude)
    raise CalibrationFailed(
        f"No clamp value with |m| <= {cap} reaches KL {target_kl} for {feature.key} ({sign.value})",
        probe.max_kl,
    )


# ── steering ────────────────────────────────────────────────────────────────────

def steered_generations(
    model: Model,
    tokenizer: Tokenizer,
    featurizer: Featurizer,
    feature: FeatureRef,
    config: EvalConfig,
    seed: Optional[int] = None,
) -> SteeredTextSet:
    """prompts x clamp values generations, prompt-major; the clamp stays on for every decoding step."""
    seed = config.seed if seed is None else seed
    prompts = [tokenizer.encode(p) for p in config.open_ended_prompts]
    clamp_values = [
        calibrate_clamp(
            model, featurizer, feature, prompts, target, sign,
            tolerance=config.calibration_tolerance,
            cap=config.calibration_cap,
            max_iter=config.calibration_max_iter,
        )
        for target, sign in config.clamp_schedule
    ]
    mode = SamplingMode.GREEDY if config.greedy else SamplingMode.TEMPERATURE
    generations = []
    for p_idx, (text, tokens) in enumerate(zip(config.open_ended_prompts, prompts)):
        for c_idx, m in enumerate(clamp_values):
            sampling = SamplingConfig(
                mode=mode,
                temperature=config.temperature,
                seed=derive_seed(seed, feature.key, p_idx, c_idx),
                max_new_tokens=config.max_gen_tokens,
            )
            intervention = Intervention(feature.site, featurizer, feature.index, m)
            new_tokens = generate(model, tokens, sampling, intervention, eos_id=tokenizer.eos_id)
            generations.append(SteeredText(
                prompt=text, clamp_value=m, text=tokenizer.decode(new_tokens), n_tokens=len(new_tokens),
            ))
    return SteeredTextSet(steered_feature=feature, clamp_values=clamp_values, generations=generations)


def sample_distractors(
    feature: FeatureRef,
    width: int,
    rng: np.random.Generator,
    n: int = 2,
    index: Optional[ActivationIndex] = None,
    exclude: Sequence[FeatureRef] = (),
) -> list[FeatureRef]:
    """Uniform draw without replacement from the same featurizer, skipping the target and known-dead features."""
    excluded = {feature.index} | {f.index for f in exclude}
    candidates = []
    for i in range(width):
        if i in excluded:
            continue
        candidate = feature.with_index(i)
        if index is not None and candidate in index and index.get(candidate).corpus_max <= 0.0:
            continue
        candidates.append(candidate)
    if len(candidates) < n:
        raise PreconditionError(f"Only {len(candidates)} eligible distractors for {feature.key}, need {n}")
    picks = rng.choice(len(candidates), size=n, replace=False)
    return [candidates[int(i)] for i in picks]


def output_eval(
    gateway: LLMGateway,
    description: str,
    target_set: SteeredTextSet,
    distractor_sets: Sequence[SteeredTextSet],
    seed: int,
    prompts: Optional[PromptLibrary] = None,
    max_reasks: int = 2,
) -> OutputEvalResult:
    if len(distractor_sets) != 2:
        raise PreconditionError("Output evaluation needs exactly two distractor sets")
    sets = [target_set, *distractor_sets]
    if len({len(s) for s in sets}) != 1:
        raise PreconditionError("All three steered sets must hold the same number of texts")
    features = [s.steered_feature.key for s in sets]
    if len(set(features)) != 3:
        raise PreconditionError("Distractors must differ from the target and from each other")
    prompts = prompts or PromptLibrary()

    order = [int(i) for i in np.random.default_rng(seed).permutation(3)]
    request = ChatRequest.for_role(
        RoleClass.JUDGE,
        prompts.render(JUDGE_TEMPLATE, description=description, sets=render_sets([sets[i].texts for i in order])),
    )
    choice = _complete_parsed(gateway, request, parse_judge_choice, max_reasks)
    return OutputEvalResult(
        target_feature=target_set.steered_feature,
        distractors=(distractor_sets[0].steered_feature, distractor_sets[1].steered_feature),
        presentation_order=order,
        judge_choice=choice,
        target_clamp_values=target_set.clamp_values,
        passed=order[choice - 1] == 0,
    )


# ── aggregation ─────────────────────────────────────────────────────────────────

def _summaries(frame: pd.DataFrame, keys: list[str], group_col: Optional[str], bootstrap: bool, seed: int) -> list[MethodSummary]:
    out = []
    for key, rows in frame.groupby(keys, sort=True):
        method, metric = key[0], key[1]
        n = len(rows)
        passed = int(rows["passed"].sum())
        low, high = normal_ci(passed, n)
        b_low, b_high = bootstrap_ci(rows["passed"].astype(float).tolist(), seed=seed) if bootstrap else (None, None)
        out.append(MethodSummary(
            method=method,
            metric=metric,
            group=key[2] if group_col else "all",
            n=n,
            passed=passed,
            pass_rate=passed / n,
            ci_low=low,
            ci_high=high,
            bootstrap_low=b_low,
            bootstrap_high=b_high,
        ))
    return out


def aggregate(records: Sequence[EvalRecord], by_site: bool = True, bootstrap: bool = False, seed: int = 0) -> list[MethodSummary]:
    """Pass rate per (method, metric) with a 95% normal-approximation CI, plus a per-site breakdown."""
    if not records:
        return []
    frame = pd.DataFrame([
        {
            "method": r.description_method,
            "metric": r.metric,
            "site": r.feature.site.name,
            "passed": bool(r.passed),
        }
        for r in records
    ])
    summaries = _summaries(frame, ["method", "metric"], None, bootstrap, seed)
    if by_site:
        summaries += _summaries(frame, ["method", "metric", "site"], "site", bootstrap, seed)
    return summaries


# ── controller ──────────────────────────────────────────────────────────────────

class EvalController:
    """Runs both metrics for described features; steered sets are computed once per feature and reused."""

    def __init__(
        self,
        model: Model,
        tokenizer: Tokenizer,
        registry: FeaturizerRegistry,
        gateway: LLMGateway,
        config: EvalConfig,
        prompts: Optional[PromptLibrary] = None,
        index: Optional[ActivationIndex] = None,
        clock: Optional[RunClock] = None,
    ):
        self.model = model
        self.tokenizer = tokenizer
        self.registry = registry
        self.gateway = gateway
        self.config = config
        self.prompts = prompts or PromptLibrary()
        self.index = index
        self.clock = clock or RunClock()
        self._steered: dict[str, SteeredTextSet] = {}
        self._distractors: dict[str, list[SteeredTextSet]] = {}
        self._lock = threading.Lock()

    def evaluate_input(self, feature: FeatureRef, method: str, description: str) -> EvalRecord:
        started = self.clock.now()
        activating, neutral = gen_eval_sentences(
            self.gateway, description, self.config.n_sentences_per_set, self.prompts, self.config.max_reasks,
        )
        result = input_eval(
            self.model, self.tokenizer, self.registry.for_feature(feature), feature, activating, neutral,
        )
        return EvalRecord(
            feature=feature,
            description_method=method,
            metric="input",
            description=description,
            payload=result,
            passed=result.passed,
            seeds={"eval": self.config.seed},
            timestamps={"started": started, "finished": self.clock.now()},
        )

    def steered_set(self, feature: FeatureRef) -> SteeredTextSet:
        with self._lock:
            cached = self._steered.get(feature.key)
        if cached is not None:
            return cached
        steered = steered_generations(
            self.model, self.tokenizer, self.registry.for_feature(feature), feature, self.config,
        )
        with self._lock:
            return self._steered.setdefault(feature.key, steered)

    def distractor_sets(self, feature: FeatureRef) -> list[SteeredTextSet]:
        """Two calibratable distractors; features that fail calibration are replaced by fresh draws."""
        with self._lock:
            cached = self._distractors.get(feature.key)
        if cached is not None:
            return cached
        rng = rng_for(self.config.seed, "distractors", feature.key)
        width = self.registry.for_feature(feature).k
        chosen: list[SteeredTextSet] = []
        rejected: list[FeatureRef] = []
        for _ in range(self.config.distractor_attempts):
            needed = 2 - len(chosen)
            if needed == 0:
                break
            taken = [s.steered_feature for s in chosen]
            for candidate in sample_distractors(feature, width, rng, needed, self.index, exclude=taken + rejected):
                try:
                    chosen.append(self.steered_set(candidate))
                except CalibrationFailed as e:
                    logger.info(f"Distractor {candidate.key} rejected: {e}")
                    rejected.append(candidate)
        if len(chosen) < 2:
            raise PreconditionError(f"Could not find two calibratable distractors for {feature.key}")
        with self._lock:
            return self._distractors.setdefault(feature.key, chosen)

    def evaluate_output(self, feature: FeatureRef, method: str, description: str) -> EvalRecord:
        started = self.clock.now()
        target = self.steered_set(feature)
        distractors = self.distractor_sets(feature)
        seed = derive_seed(self.config.seed, "judge", feature.key)
        result = output_eval(
            self.gateway, description, target, distractors, seed, self.prompts, self.config.max_reasks,
        )
        return EvalRecord(
            feature=feature,
            description_method=method,
            metric="output",
            description=description,
            payload=result,
            passed=result.passed,
            seeds={"eval": self.config.seed, "presentation": seed},
            timestamps={"started": started, "finished": self.clock.now()},
        )
