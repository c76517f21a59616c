import logging
import threading
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from featdesc.agents.llm import LLMGateway
from featdesc.agents.prompts import PromptLibrary
from featdesc.controllers.index_controller import CorpusSequence, read_corpus, tokenize_corpus
from featdesc.db_utility.jsonl_store import RunClock, RunStore
from featdesc.engine.tokenizer import Tokenizer
from featdesc.engine.transformer import Model
from featdesc.exceptions import ConfigError
from featdesc.featurizers.registry import FeaturizerRegistry
from featdesc.models import PipelineConfig

logger = logging.getLogger(__name__)


def _resolve(base: Path, value: Optional[Path]) -> Optional[Path]:
    if value is None:
        return None
    value = Path(value)
    return value if value.is_absolute() else (base / value).resolve()


def load_config(path: Path, **overrides) -> PipelineConfig:
    """Parses the TOML config; relative paths resolve against its directory. None-valued overrides are ignored."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file {path} does not exist")
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid TOML: {e}") from e

    gateway_backend = overrides.pop("backend", None)
    if gateway_backend is not None:
        raw.setdefault("gateway", {})["backend"] = gateway_backend
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        config = PipelineConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid config {path}:\n{e}") from e

    base = path.parent.resolve()
    model = config.model.model_copy(update={
        "weights": _resolve(base, config.model.weights),
        "tokenizer": _resolve(base, config.model.tokenizer),
    })
    gateway = config.gateway.model_copy(update={"cache_dir": _resolve(base, config.gateway.cache_dir)})
    config = config.model_copy(update={
        "model": model,
        "gateway": gateway,
        "featurizers": _resolve(base, config.featurizers),
        "corpus": _resolve(base, config.corpus),
        "output_dir": _resolve(base, config.output_dir),
        "template_dir": _resolve(base, config.template_dir),
    })
    for label, file in [
        ("model weights", config.model.weights),
        ("tokenizer", config.model.tokenizer),
        ("featurizer manifest", config.featurizers),
        ("corpus", config.corpus),
    ]:
        if not file.exists():
            raise ConfigError(f"{label} file {file} does not exist")
    return config


class PipelineState:
    """Model, tokenizer, featurizers, corpus and gateway shared by one CLI run, loaded on first use."""

    def __init__(self, config: PipelineConfig):
        load_dotenv()
        self.config = config
        self.clock = RunClock(pinned=config.pinned_clock)
        self.store = RunStore(config.output_dir)
        self.prompts = PromptLibrary(config.template_dir)
        self._model: Optional[Model] = None
        self._tokenizer: Optional[Tokenizer] = None
        self._registry: Optional[FeaturizerRegistry] = None
        self._gateway: Optional[LLMGateway] = None
        self._sequences: Optional[list[CorpusSequence]] = None
        self._lock = threading.Lock()

    @property
    def model(self) -> Model:
        with self._lock:
            if self._model is None:
                section = self.config.model
                logger.info(f"Loading model {section.model_id} from {section.weights}")
                self._model = Model.load(section.weights, section.config, model_id=section.model_id)
            return self._model

    @property
    def tokenizer(self) -> Tokenizer:
        with self._lock:
            if self._tokenizer is None:
                self._tokenizer = Tokenizer.from_file(self.config.model.tokenizer)
            return self._tokenizer

    @property
    def registry(self) -> FeaturizerRegistry:
        model = self.model
        with self._lock:
            if self._registry is None:
                self._registry = FeaturizerRegistry.from_manifest(model, self.config.featurizers)
            return self._registry

    @property
    def gateway(self) -> LLMGateway:
        with self._lock:
            if self._gateway is None:
                self._gateway = LLMGateway(self.config.gateway, clock=self.clock)
            return self._gateway

    @property
    def sequences(self) -> list[CorpusSequence]:
        tokenizer, model = self.tokenizer, self.model
        with self._lock:
            if self._sequences is None:
                docs = read_corpus(self.config.corpus)
                self._sequences = tokenize_corpus(docs, tokenizer, self.config.index.window, model.config.n_ctx)
                logger.info(f"Corpus: {len(self._sequences)} sequences")
            return self._sequences
