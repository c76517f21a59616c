from featdesc.models.features import HookKind, HookSite, FeatureRef, NEURON
from featdesc.models.activations import ActivationRecord, FeatureActivationSummary, QuantileBand
from featdesc.models.descriptions import (
    BaseMethod,
    Description,
    Evidence,
    LLMFingerprint,
    MethodKind,
    MethodSpec,
    MetricName,
    RenderedRecord,
    TokenScore,
)
from featdesc.models.evaluation import (
    EvalConfig,
    EvalRecord,
    InputEvalResult,
    MethodSummary,
    OutputEvalResult,
    Sign,
    SteeredText,
    SteeredTextSet,
)
from featdesc.models.revival import ComboPrompt, RevivalPlan, RevivalResult
from featdesc.models.config import (
    CostModel,
    GatewayConfig,
    IndexConfig,
    MethodParams,
    ModelConfig,
    PipelineConfig,
    RetryPolicy,
    RevivalConfig,
    RevivalSchedule,
    RoleClass,
    SamplingConfig,
    SamplingMode,
    VocabProjVariant,
    VocabSource,
    VocabTarget,
)
