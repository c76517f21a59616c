"""
Pinned toy fixture: a seeded 2-layer transformer, its tokenizer, a handful of
SAEs, a small corpus and a ready-to-run config.

Residual dimensions 14 and 15 are reserved markers. Only the "cat"/"cats"
tokens write dimension 14 and only "zebra" writes dimension 15; positional
embeddings and every attention/MLP output leave both dimensions at zero, so a
ReLU latent reading one marker dimension fires on exactly that token. The
unembedding reads each marker dimension out as its own token only.
"""

import hashlib
import json
import logging
import string
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from featdesc.engine.loader import write_container
from featdesc.engine.tokenizer import Tokenizer, TokenizerSpec
from featdesc.engine.transformer import Model
from featdesc.featurizers.featurizer import SaeFeaturizer
from featdesc.featurizers.registry import write_manifest
from featdesc.models.config import ModelConfig
from featdesc.models.featurizers import ActivationKind, SaeManifestEntry
from featdesc.models.features import HookKind, HookSite

logger = logging.getLogger(__name__)

TOY_CONFIG = ModelConfig(n_layers=2, d_model=16, d_mlp=32, n_heads=2, vocab_size=64, n_ctx=128)
TOY_MODEL_ID = "toy-2l"

CAT_DIM = 14
ZEBRA_DIM = 15
MARKER_VALUE = 10.0
MARKER_DIMS = (CAT_DIM, ZEBRA_DIM)

PUNCTUATION = list(".,!?'\"-:;()")
WORDS = [
    "the", "cat", "cats", "dog", "war", "battle", "troops", "zebra",
    "think", "honestly", "most", "important", "thing", "and",
]
PROBE_TEXT = "the cat and the dog"

CORPUS = [
    "the cat sat on the mat.",
    "the dog ran to the park.",
    "war and battle left the troops tired.",
    "the troops marched at dawn.",
    "cats like to sleep in the sun.",
    "i think the dog is happy.",
    "honestly, the most important thing is rest.",
    "we ate 3 apples and 2 pears.",
    "the battle lasted 10 days.",
    "a small cat chased the dog.",
    "rain fell on the quiet town.",
    "she wrote a letter to her friend.",
    "the war ended in may.",
    "my dog likes long walks.",
    "the old man read a book.",
    "birds sing in the morning.",
    "the river flows past the mill.",
    "he found a key under the rug.",
    "the team won the game!",
    "do you like tea or coffee?",
]


class ToyFixture(BaseModel):
    root: Path
    weights: Path
    tokenizer: Path
    featurizers: Path
    corpus: Path
    config: Path
    checksum: Path
    probe_tokens: list[int]
    probe_checksum: str


def toy_tokenizer_spec() -> TokenizerSpec:
    pieces = [" "] + list(string.ascii_lowercase) + list(string.digits) + PUNCTUATION + WORDS
    vocab = {"<bos>": 0, "<eos>": 1}
    vocab.update({piece: i + 2 for i, piece in enumerate(pieces)})
    assert len(vocab) == TOY_CONFIG.vocab_size
    return TokenizerSpec(vocab=vocab, bos_id=0, eos_id=1, lowercase=True)


def toy_weights(tokenizer: Tokenizer, seed: int = 0) -> dict[str, np.ndarray]:
    cfg = TOY_CONFIG
    rng = np.random.default_rng(seed)
    d, m, v = cfg.d_model, cfg.d_mlp, cfg.vocab_size
    free = [i for i in range(d) if i not in MARKER_DIMS]

    W_E = np.zeros((v, d))
    W_E[:, free] = rng.normal(0.0, 1.0, (v, len(free)))
    for word in ("cat", "cats"):
        W_E[tokenizer.spec.vocab[word], CAT_DIM] = MARKER_VALUE
    W_E[tokenizer.spec.vocab["zebra"], ZEBRA_DIM] = MARKER_VALUE
    W_pos = np.zeros((cfg.n_ctx, d))
    W_pos[:, free] = rng.normal(0.0, 0.1, (cfg.n_ctx, len(free)))

    weights = {"embed.W_E": W_E, "pos_embed.W_pos": W_pos}
    for layer in range(cfg.n_layers):
        p = f"blocks.{layer}"
        for ln in ("ln1", "ln2"):
            weights[f"{p}.{ln}.w"] = 1.0 + rng.normal(0.0, 0.1, d)
            weights[f"{p}.{ln}.b"] = rng.normal(0.0, 0.1, d)
        for proj in ("Q", "K", "V", "O"):
            weights[f"{p}.attn.W_{proj}"] = rng.normal(0.0, 0.3, (d, d))
            weights[f"{p}.attn.b_{proj}"] = rng.normal(0.0, 0.1, d)
        weights[f"{p}.mlp.W_in"] = rng.normal(0.0, 0.3, (d, m))
        weights[f"{p}.mlp.b_in"] = rng.normal(0.0, 0.1, m)
        weights[f"{p}.mlp.W_out"] = rng.normal(0.0, 0.3, (m, d))
        weights[f"{p}.mlp.b_out"] = rng.normal(0.0, 0.1, d)
        for name in ("attn.W_O", "mlp.W_out"):
            weights[f"{p}.{name}"][:, MARKER_DIMS] = 0.0
        for name in ("attn.b_O", "mlp.b_out"):
            weights[f"{p}.{name}"][list(MARKER_DIMS)] = 0.0
    weights["ln_final.w"] = np.ones(d)
    weights["ln_final.b"] = np.zeros(d)
    W_U = rng.normal(0.0, 1.0, (d, v))
    # marker dimensions read out only as their own tokens
    W_U[list(MARKER_DIMS), :] = 0.0
    W_U[CAT_DIM, tokenizer.spec.vocab["cat"]] = 3.0
    W_U[CAT_DIM, tokenizer.spec.vocab["cats"]] = 2.5
    W_U[ZEBRA_DIM, tokenizer.spec.vocab["zebra"]] = 3.0
    weights["unembed.W_U"] = W_U
    weights["unembed.b_U"] = np.zeros(v)
    return weights


def marker_sae(site: HookSite = HookSite(kind=HookKind.RESID_POST, layer=0)) -> SaeFeaturizer:
    """Latent 0 fires on "cat"/"cats", latent 1 on "zebra"; each has w_enc . d_f = 1."""
    d = TOY_CONFIG.d_model
    W_enc = np.zeros((d, 2))
    W_dec = np.zeros((2, d))
    for i, dim in enumerate(MARKER_DIMS):
        W_enc[dim, i] = 1.0
        W_dec[i, dim] = 1.0
    return SaeFeaturizer("markers", site, W_enc, np.full(2, -1.0), W_dec, np.zeros(d))


def random_sae(
    sae_id: str,
    site: HookSite,
    d: int,
    k: int,
    rng: np.random.Generator,
    activation: ActivationKind = ActivationKind.RELU,
    topk: int | None = None,
) -> SaeFeaturizer:
    W_enc = rng.normal(0.0, 1.0, (d, k))
    W_enc /= np.linalg.norm(W_enc, axis=0, keepdims=True)
    W_dec = W_enc.T.copy()
    threshold = np.abs(rng.normal(0.0, 0.5, k)) if activation is ActivationKind.JUMPRELU else None
    b_enc = np.full(k, -1.0) if activation is ActivationKind.RELU else rng.normal(0.0, 0.5, k)
    return SaeFeaturizer(
        sae_id, site, W_enc, b_enc, W_dec, rng.normal(0.0, 0.1, d),
        activation=activation, threshold=threshold, topk=topk,
    )


def toy_saes(seed: int = 0) -> list[SaeFeaturizer]:
    rng = np.random.default_rng(seed + 1)
    d, m = TOY_CONFIG.d_model, TOY_CONFIG.d_mlp
    return [
        random_sae("toy", HookSite(kind=HookKind.RESID_POST, layer=0), d, 8, rng),
        marker_sae(),
        random_sae("toy_topk", HookSite(kind=HookKind.RESID_POST, layer=1), d, 8, rng, ActivationKind.TOPK, topk=3),
        random_sae("toy_jump", HookSite(kind=HookKind.MLP_HIDDEN, layer=1), m, 8, rng, ActivationKind.JUMPRELU),
    ]


def probe_checksum(model: Model, tokens: list[int]) -> str:
    logits = model.forward([tokens]).row_logits()
    return hashlib.sha256(np.ascontiguousarray(logits, dtype="<f8").tobytes()).hexdigest()


_CONFIG_TOML = """\
seed = {seed}
output_dir = "runs"
featurizers = "featurizers.json"
corpus = "corpus.jsonl"

[model]
model_id = "{model_id}"
weights = "toy_model.safetensors"
tokenizer = "tokenizer.json"

[model.config]
n_layers = {n_layers}
d_model = {d_model}
d_mlp = {d_mlp}
n_heads = {n_heads}
vocab_size = {vocab_size}
n_ctx = {n_ctx}

[index]
window = 64

[methods]
t_vocabproj = 10
t_tokenchange = 5
k_prompts = 8
prompt_len = 8

[revival]
n_sentences = 20

[gateway]
backend = "mock"
"""


def build_toy_fixture(out_dir: Path, seed: int = 0) -> ToyFixture:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tokenizer = Tokenizer(toy_tokenizer_spec())
    tokenizer_path = out_dir / "tokenizer.json"
    tokenizer.save(tokenizer_path)

    weights_path = out_dir / "toy_model.safetensors"
    weights = toy_weights(tokenizer, seed)
    write_container(weights_path, weights, metadata={"model_id": TOY_MODEL_ID, "seed": str(seed)})

    manifest = {}
    for sae in toy_saes(seed):
        sae_path = out_dir / f"sae_{sae.sae_id}.safetensors"
        sae.save(sae_path)
        manifest[sae.sae_id] = SaeManifestEntry(
            file=Path(sae_path.name), site=sae.site, activation=sae.activation_kind, k=sae.k, topk=sae.topk,
        )
    manifest_path = out_dir / "featurizers.json"
    write_manifest(manifest_path, manifest)

    corpus_path = out_dir / "corpus.jsonl"
    with open(corpus_path, "w", encoding="utf-8") as f:
        for i, text in enumerate(CORPUS):
            f.write(json.dumps({"doc_id": f"doc-{i:03d}", "text": text}) + "\n")

    config_path = out_dir / "config.toml"
    config_path.write_text(
        _CONFIG_TOML.format(seed=seed, model_id=TOY_MODEL_ID, **TOY_CONFIG.model_dump(include={
            "n_layers", "d_model", "d_mlp", "n_heads", "vocab_size", "n_ctx",
        })),
        encoding="utf-8",
    )

    model = Model.load(weights_path, TOY_CONFIG, model_id=TOY_MODEL_ID)
    probe = tokenizer.encode(PROBE_TEXT)
    checksum = probe_checksum(model, probe)
    checksum_path = out_dir / "checksum.json"
    with open(checksum_path, "w", encoding="utf-8") as f:
        json.dump({"probe_text": PROBE_TEXT, "probe_tokens": probe, "sha256": checksum}, f, indent=2)

    logger.info(f"Toy fixture written to {out_dir} (probe checksum {checksum[:12]})")
    return ToyFixture(
        root=out_dir,
        weights=weights_path,
        tokenizer=tokenizer_path,
        featurizers=manifest_path,
        corpus=corpus_path,
        config=config_path,
        checksum=checksum_path,
        probe_tokens=probe,
        probe_checksum=checksum,
    )
