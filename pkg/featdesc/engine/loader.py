import logging
import re
from pathlib import Path

import numpy as np
from safetensors.numpy import load_file, save_file

from featdesc.exceptions import LoadError, MissingTensor, ShapeMismatch
from featdesc.models.config import ModelConfig, PositionalScheme

logger = logging.getLogger(__name__)

_BLOCK_RE = re.compile(r"^blocks\.(\d+)\.")


def expected_tensors(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor names and shapes the engine reads for `config`."""
    d, m, v = config.d_model, config.d_mlp, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "embed.W_E": (v, d),
        "unembed.W_U": (d, v),
        "unembed.b_U": (v,),
    }
    if config.positional is PositionalScheme.LEARNED:
        shapes["pos_embed.W_pos"] = (config.n_ctx, d)
    if config.layernorm_enabled:
        shapes[config.final_layernorm.gain_tensor] = (d,)
        shapes[config.final_layernorm.bias_tensor] = (d,)
    for layer in range(config.n_layers):
        prefix = f"blocks.{layer}"
        if config.layernorm_enabled:
            for ln in ("ln1", "ln2"):
                shapes[f"{prefix}.{ln}.w"] = (d,)
                shapes[f"{prefix}.{ln}.b"] = (d,)
        for proj in ("Q", "K", "V", "O"):
            shapes[f"{prefix}.attn.W_{proj}"] = (d, d)
            shapes[f"{prefix}.attn.b_{proj}"] = (d,)
        shapes[f"{prefix}.mlp.W_in"] = (d, m)
        shapes[f"{prefix}.mlp.b_in"] = (m,)
        shapes[f"{prefix}.mlp.W_out"] = (m, d)
        shapes[f"{prefix}.mlp.b_out"] = (d,)
    return shapes


def read_container(path: Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"Weight container {path} does not exist")
    try:
        return load_file(str(path))
    except Exception as e:
        raise LoadError(f"Could not parse weight container {path}: {e}") from e


def write_container(path: Path, tensors: dict[str, np.ndarray], metadata: dict[str, str] | None = None) -> None:
    save_file({name: np.ascontiguousarray(t) for name, t in tensors.items()}, str(path), metadata=metadata)


def check_tensors(raw: dict[str, np.ndarray], shapes: dict[str, tuple[int, ...]], path: Path | str = "") -> dict[str, np.ndarray]:
    """Validates presence and shape of every expected tensor; returns read-only float64 copies."""
    checked = {}
    for name, shape in shapes.items():
        if name not in raw:
            raise MissingTensor(name, str(path))
        if tuple(raw[name].shape) != tuple(shape):
            raise ShapeMismatch(name, shape, raw[name].shape)
        tensor = np.array(raw[name], dtype=np.float64)
        tensor.setflags(write=False)
        checked[name] = tensor
    return checked


def load_weights(path: Path, config: ModelConfig) -> dict[str, np.ndarray]:
    raw = read_container(path)
    layers = {int(match.group(1)) for name in raw if (match := _BLOCK_RE.match(name))}
    if layers and len(layers) != config.n_layers:
        raise ShapeMismatch("n_layers", config.n_layers, len(layers))
    weights = check_tensors(raw, expected_tensors(config), path)
    logger.info(f"Loaded {len(weights)} tensors from {path}")
    return weights
