"""
Numpy inference engine for small decoder-only transformers.

Pre-LayerNorm blocks with causal multi-head attention and a GELU MLP. Hidden
states can be captured at `resid_post.<layer>` (block output) and
`mlp_hidden.<layer>` (post-activation MLP hidden layer), and one clamp
intervention can edit a site before later layers read it.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Optional, Sequence

import numpy as np
from scipy.special import rel_entr, softmax

from featdesc.engine.loader import load_weights
from featdesc.exceptions import (
    DimensionMismatch,
    EmptyInput,
    SequenceTooLong,
    TokenOutOfRange,
    UnknownHookSite,
)
from featdesc.models.config import ModelConfig, PositionalScheme, SamplingConfig, SamplingMode
from featdesc.models.features import HookKind, HookSite

if TYPE_CHECKING:
    from featdesc.featurizers.featurizer import Featurizer

logger = logging.getLogger(__name__)

KL_EPSILON = 1e-12
_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh approximation"""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def layer_norm(x: np.ndarray, w: np.ndarray, b: np.ndarray, eps: float) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * w + b


@dataclass(frozen=True)
class Intervention:
    """Clamp one feature to `value` at every position of `site`."""
    site: HookSite
    featurizer: "Featurizer"
    feature_index: int
    value: float

    def apply(self, hidden: np.ndarray) -> np.ndarray:
        return self.featurizer.clamp_edit(hidden, self.feature_index, self.value)


@dataclass
class ForwardOutput:
    logits: np.ndarray                      # [B, T, V]
    captures: dict[HookSite, np.ndarray]    # site -> [B, T, dim]
    lengths: list[int]

    def hidden(self, site: HookSite, row: int = 0) -> np.ndarray:
        return self.captures[site][row, : self.lengths[row]]

    def row_logits(self, row: int = 0) -> np.ndarray:
        return self.logits[row, : self.lengths[row]]

    def last_logits(self) -> np.ndarray:
        return np.stack([self.logits[i, n - 1] for i, n in enumerate(self.lengths)])


class Model:
    """Immutable handle over float64 weights; every call owns its activations."""

    def __init__(self, config: ModelConfig, weights: dict[str, np.ndarray], model_id: str = "model"):
        self.config = config
        self.weights = weights
        self.model_id = model_id
        self._eps = config.final_layernorm.eps

    @classmethod
    def load(cls, weights_path: Path, config: ModelConfig, model_id: str = "model") -> "Model":
        return cls(config, load_weights(weights_path, config), model_id=model_id)

    # ── shapes ──────────────────────────────────────────────────────────────

    @property
    def W_E(self) -> np.ndarray:
        return self.weights["embed.W_E"]

    @property
    def W_U(self) -> np.ndarray:
        return self.weights["unembed.W_U"]

    @property
    def b_U(self) -> np.ndarray:
        return self.weights["unembed.b_U"]

    def site_dim(self, site: HookSite) -> int:
        self.check_site(site)
        return self.config.d_model if site.kind is HookKind.RESID_POST else self.config.d_mlp

    def check_site(self, site: HookSite) -> None:
        if not 0 <= site.layer < self.config.n_layers:
            raise UnknownHookSite(f"Hook site {site.name} is outside a {self.config.n_layers}-layer model")

    def validate_tokens(self, tokens: Sequence[int]) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if ids.size == 0:
            raise EmptyInput("Token sequence is empty")
        if ids.size > self.config.n_ctx:
            raise SequenceTooLong(f"Sequence of {ids.size} tokens exceeds the context limit {self.config.n_ctx}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            bad = int(ids[(ids < 0) | (ids >= self.config.vocab_size)][0])
            raise TokenOutOfRange(f"Token id {bad} is outside vocabulary of size {self.config.vocab_size}")
        return ids

    # ── forward ─────────────────────────────────────────────────────────────

    def final_ln(self, x: np.ndarray) -> np.ndarray:
        if not self.config.layernorm_enabled:
            return x
        fl = self.config.final_layernorm
        return layer_norm(x, self.weights[fl.gain_tensor], self.weights[fl.bias_tensor], fl.eps)

    def _ln(self, x: np.ndarray, prefix: str) -> np.ndarray:
        if not self.config.layernorm_enabled:
            return x
        return layer_norm(x, self.weights[f"{prefix}.w"], self.weights[f"{prefix}.b"], self._eps)

    def _attention(self, x: np.ndarray, layer: int) -> np.ndarray:
        B, T, d = x.shape
        H, dh = self.config.n_heads, self.config.d_head
        p = f"blocks.{layer}.attn"
        w = self.weights

        def heads(t):
            return t.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        q = heads(x @ w[f"{p}.W_Q"] + w[f"{p}.b_Q"])
        k = heads(x @ w[f"{p}.W_K"] + w[f"{p}.b_K"])
        v = heads(x @ w[f"{p}.W_V"] + w[f"{p}.b_V"])
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
        causal = np.triu(np.ones((T, T), dtype=bool), k=1)
        scores = np.where(causal, -np.inf, scores)
        pattern = softmax(scores, axis=-1)
        z = (pattern @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
        return z @ w[f"{p}.W_O"] + w[f"{p}.b_O"]

    def forward(
        self,
        sequences: Sequence[Sequence[int]],
        capture: Iterable[HookSite] = (),
        intervention: Optional[Intervention] = None,
        pad_id: int = 0,
    ) -> ForwardOutput:
        """Batched forward over right-padded sequences; causal masking keeps padding inert."""
        rows = [self.validate_tokens(s) for s in sequences]
        if not rows:
            raise EmptyInput("Batch holds no sequences")
        capture = set(capture)
        for site in capture:
            self.check_site(site)
        if intervention is not None:
            self.check_site(intervention.site)

        lengths = [len(r) for r in rows]
        T = max(lengths)
        tokens = np.full((len(rows), T), pad_id, dtype=np.int64)
        for i, r in enumerate(rows):
            tokens[i, : len(r)] = r

        w = self.weights
        resid = self.W_E[tokens]
        if self.config.positional is PositionalScheme.LEARNED:
            resid = resid + w["pos_embed.W_pos"][:T]

        captures: dict[HookSite, np.ndarray] = {}
        for layer in range(self.config.n_layers):
            p = f"blocks.{layer}"
            resid = resid + self._attention(self._ln(resid, f"{p}.ln1"), layer)

            hidden = gelu(self._ln(resid, f"{p}.ln2") @ w[f"{p}.mlp.W_in"] + w[f"{p}.mlp.b_in"])
            hidden = self._hook(HookSite(kind=HookKind.MLP_HIDDEN, layer=layer), hidden, capture, captures, intervention)
            resid = resid + hidden @ w[f"{p}.mlp.W_out"] + w[f"{p}.mlp.b_out"]
            resid = self._hook(HookSite(kind=HookKind.RESID_POST, layer=layer), resid, capture, captures, intervention)

        logits = self.final_ln(resid) @ self.W_U + self.b_U
        return ForwardOutput(logits=logits, captures=captures, lengths=lengths)

    @staticmethod
    def _hook(site, x, capture, captures, intervention):
        if intervention is not None and intervention.site == site:
            x = intervention.apply(x)
        if site in capture:
            captures[site] = x
        return x


# ── operations ──────────────────────────────────────────────────────────────────

def load_model(weights_path: Path, config: ModelConfig, model_id: str = "model") -> Model:
    return Model.load(weights_path, config, model_id=model_id)


def forward_capture(
    model: Model,
    tokens: Sequence[int],
    site: HookSite,
    intervention: Optional[Intervention] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Hidden states at `site` ([T, dim], after any intervention) and logits ([T, V])."""
    out = model.forward([tokens], capture=[site], intervention=intervention)
    return out.hidden(site), out.row_logits()


def next_token_distribution(
    model: Model,
    tokens: Sequence[int],
    intervention: Optional[Intervention] = None,
) -> np.ndarray:
    return next_token_distributions(model, [tokens], intervention)[0]


def next_token_distributions(
    model: Model,
    prompts: Sequence[Sequence[int]],
    intervention: Optional[Intervention] = None,
) -> np.ndarray:
    """Softmax of last-position logits for each prompt: [n_prompts, V]."""
    out = model.forward(prompts, intervention=intervention)
    return softmax(out.last_logits(), axis=-1)


def generate(
    model: Model,
    prompt: Sequence[int],
    sampling: SamplingConfig,
    intervention: Optional[Intervention] = None,
    eos_id: Optional[int] = None,
) -> list[int]:
    """
    Decodes up to `sampling.max_new_tokens` tokens. The full forward is recomputed
    each step so the intervention applies to every position, prompt included.
    EOS stops decoding and is not returned.
    """
    sequence = [int(t) for t in model.validate_tokens(prompt)]
    rng = np.random.default_rng(sampling.seed)
    generated: list[int] = []
    for _ in range(sampling.max_new_tokens):
        if len(sequence) >= model.config.n_ctx:
            break
        logits = model.forward([sequence], intervention=intervention).last_logits()[0]
        if sampling.mode is SamplingMode.GREEDY:
            token = int(np.argmax(logits))
        else:
            probs = softmax(logits / sampling.temperature)
            token = int(rng.choice(len(probs), p=probs))
        if eos_id is not None and token == eos_id:
            break
        generated.append(token)
        sequence.append(token)
    return generated


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) with q floored at KL_EPSILON; 0 * log(0 / q) counts as 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionMismatch(f"Distributions have shapes {p.shape} and {q.shape}")
    return max(0.0, float(np.sum(rel_entr(p, np.maximum(q, KL_EPSILON)))))
