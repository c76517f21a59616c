"""Compute-cost heuristics: a forward pass costs about 6N FLOPs per token."""

import logging
from typing import Optional

from pydantic import BaseModel

from featdesc.models.config import CostModel
from featdesc.models.descriptions import BaseMethod, MethodSpec

logger = logging.getLogger(__name__)

TOKENCHANGE_NOTE = (
    "per-feature accounting (baseline + clamped pass over every prompt token); "
    "published TokenChange totals are not reproducible from it"
)


class FlopsEstimate(BaseModel):
    method: str
    flops: float
    note: Optional[str] = None


def base_method_flops(cost: CostModel, method: BaseMethod, k_prompts: int = 32, prompt_len: int = 32) -> float:
    if method is BaseMethod.MAXACT:
        # one forward over the corpus, shared by every feature
        return 6.0 * cost.n_nonembed_params * cost.corpus_tokens
    if method is BaseMethod.VOCABPROJ:
        return 2.0 * cost.vocab_size * cost.d_model * cost.feature_count
    return 6.0 * cost.n_nonembed_params * (2 * k_prompts * prompt_len) * cost.feature_count


def estimate_flops(cost: CostModel, method: MethodSpec, k_prompts: int = 32, prompt_len: int = 32) -> FlopsEstimate:
    members = method.members if method.kind.is_ensemble else (method.base,)
    flops = sum(base_method_flops(cost, m, k_prompts, prompt_len) for m in members)
    note = TOKENCHANGE_NOTE if BaseMethod.TOKENCHANGE in members else None
    return FlopsEstimate(method=method.label, flops=flops, note=note)
