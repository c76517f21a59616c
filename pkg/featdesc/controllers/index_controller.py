"""
Activation index: a streaming pass over the corpus keeps, per feature, the
top-k activating sequences and the token density counters; a band pass then
samples each quantile band of the corpus max.
"""

import hashlib
import heapq
import itertools
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import total_ordering
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np
from pydantic import BaseModel
from tqdm import tqdm

from featdesc.db_utility.jsonl_store import JsonlStore
from featdesc.engine.tokenizer import Tokenizer
from featdesc.engine.transformer import Model
from featdesc.exceptions import EmptyCorpus, FeatureNotIndexed
from featdesc.featurizers.registry import FeaturizerRegistry
from featdesc.models import ActivationRecord, FeatureActivationSummary, FeatureRef, IndexConfig, QuantileBand

logger = logging.getLogger(__name__)


class CorpusDocument(BaseModel):
    doc_id: str
    text: str


@dataclass(frozen=True)
class CorpusSequence:
    doc_id: str
    tokens: list[int]  # BOS first


def read_corpus(path: Path) -> list[CorpusDocument]:
    with open(path, "r", encoding="utf-8") as f:
        docs = [CorpusDocument.model_validate_json(line) for line in f if line.strip()]
    if not docs:
        raise EmptyCorpus(f"Corpus {path} holds no documents")
    return docs


def tokenize_corpus(docs: Iterable[CorpusDocument], tokenizer: Tokenizer, window: int, n_ctx: int) -> list[CorpusSequence]:
    limit = min(window, n_ctx)
    sequences = []
    for doc in docs:
        tokens = tokenizer.encode(doc.text)[:limit]
        if len(tokens) > 1:
            sequences.append(CorpusSequence(doc.doc_id, tokens))
    if not sequences:
        raise EmptyCorpus("Corpus produced no non-empty token sequences")
    return sequences


@total_ordering
class _Descending:
    """Inverts string order so a min-heap evicts the larger doc_id first on ties."""

    __slots__ = ("value",)

    def __init__(self, value: str):
        self.value = value

    def __eq__(self, other):
        return self.value == other.value

    def __lt__(self, other):
        return self.value > other.value


def sample_priority(seed: int, feature_key: str, doc_id: str) -> int:
    h = hashlib.blake2b(f"{seed}\x1f{feature_key}\x1f{doc_id}".encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "big")


@dataclass
class FeatureAccumulator:
    """Mergeable per-feature partial result of the first pass; merge is associative and order-free."""
    feature: FeatureRef
    k_top: int
    top: list = field(default_factory=list)          # min-heap of (max, _Descending(doc_id), n, record)
    corpus_max: float = 0.0
    total_tokens: int = 0
    active_tokens: int = 0
    n_sequences: int = 0
    _counter: itertools.count = field(default_factory=itertools.count, repr=False)

    def add(self, doc_id: str, tokens: Sequence[int], activations: np.ndarray) -> None:
        self.n_sequences += 1
        self.total_tokens += len(activations)
        self.active_tokens += int(np.count_nonzero(activations > 0))
        peak = float(activations.max())
        self.corpus_max = max(self.corpus_max, peak)
        if peak <= 0:
            return
        self._offer_top(ActivationRecord(
            doc_id=doc_id, tokens=list(tokens), activations=activations.tolist(), max_activation=peak,
        ))

    def _offer_top(self, record: ActivationRecord) -> None:
        entry = (record.max_activation, _Descending(record.doc_id), next(self._counter), record)
        if len(self.top) < self.k_top:
            heapq.heappush(self.top, entry)
        elif entry[:2] > self.top[0][:2]:
            heapq.heapreplace(self.top, entry)

    def merge(self, other: "FeatureAccumulator") -> "FeatureAccumulator":
        self.n_sequences += other.n_sequences
        self.total_tokens += other.total_tokens
        self.active_tokens += other.active_tokens
        self.corpus_max = max(self.corpus_max, other.corpus_max)
        for *_, record in other.top:
            self._offer_top(record)
        return self

    def top_records(self) -> list[ActivationRecord]:
        return sorted((e[-1] for e in self.top), key=ActivationRecord.sort_key)

    def band_sampler(self, n_bands: int, samples_per_band: int, seed: int) -> "BandSampler":
        return BandSampler(
            feature=self.feature,
            corpus_max=self.corpus_max,
            n_bands=n_bands,
            samples_per_band=samples_per_band,
            seed=seed,
            excluded=frozenset(r.doc_id for r in self.top_records()),
        )

    def finalize(self, n_bands: int, sampler: Optional["BandSampler"] = None) -> FeatureActivationSummary:
        bands = sampler.bands() if sampler is not None else [
            QuantileBand(lower=b / n_bands, upper=(b + 1) / n_bands) for b in range(n_bands)
        ]
        density = self.active_tokens / self.total_tokens if self.total_tokens else 0.0
        return FeatureActivationSummary(
            feature=self.feature,
            top_records=self.top_records(),
            quantile_samples=bands,
            activation_density=density,
            corpus_max=self.corpus_max,
            total_tokens=self.total_tokens,
            active_tokens=self.active_tokens,
            n_sequences=self.n_sequences,
        )


@dataclass
class BandSampler:
    """
    Second-pass priority reservoirs, one per band of the known corpus max.
    Band b holds records with max in (b/n, (b+1)/n] x corpus_max; top records
    are excluded. Each band keeps the `samples_per_band` lowest seeded priority
    hashes, so every band with eligible records is filled up to that size.
    """
    feature: FeatureRef
    corpus_max: float
    n_bands: int
    samples_per_band: int
    seed: int
    excluded: frozenset = frozenset()
    heaps: list = field(default_factory=list)        # per band: min-heap of (-priority, doc_id, record)

    def __post_init__(self):
        if not self.heaps:
            self.heaps = [[] for _ in range(self.n_bands)]

    def band_of(self, peak: float) -> Optional[int]:
        if peak <= 0 or self.corpus_max <= 0:
            return None
        for b in range(self.n_bands):
            if peak <= (b + 1) / self.n_bands * self.corpus_max:
                return b
        return self.n_bands - 1

    def add(self, doc_id: str, tokens: Sequence[int], activations: np.ndarray) -> None:
        if self.samples_per_band == 0 or doc_id in self.excluded:
            return
        peak = float(activations.max())
        band = self.band_of(peak)
        if band is None:
            return
        self._offer(band, ActivationRecord(
            doc_id=doc_id, tokens=list(tokens), activations=activations.tolist(), max_activation=peak,
        ))

    def _offer(self, band: int, record: ActivationRecord) -> None:
        heap = self.heaps[band]
        priority = sample_priority(self.seed, self.feature.key, record.doc_id)
        entry = (-priority, record.doc_id, record)
        if len(heap) < self.samples_per_band:
            heapq.heappush(heap, entry)
        elif entry[:2] > heap[0][:2]:
            heapq.heapreplace(heap, entry)

    def merge(self, other: "BandSampler") -> "BandSampler":
        for band, heap in enumerate(other.heaps):
            for *_, record in heap:
                self._offer(band, record)
        return self

    def bands(self) -> list[QuantileBand]:
        return [
            QuantileBand(
                lower=b / self.n_bands,
                upper=(b + 1) / self.n_bands,
                records=[e[-1] for e in sorted(heap, key=lambda e: (-e[0], e[1]))],
            )
            for b, heap in enumerate(self.heaps)
        ]


class ActivationIndex:
    def __init__(self, summaries: Iterable[FeatureActivationSummary] = ()):
        self.summaries: dict[str, FeatureActivationSummary] = {s.feature.key: s for s in summaries}

    def __contains__(self, feature: FeatureRef) -> bool:
        return feature.key in self.summaries

    def __len__(self) -> int:
        return len(self.summaries)

    def get(self, feature: FeatureRef) -> FeatureActivationSummary:
        summary = self.summaries.get(feature.key)
        if summary is None:
            raise FeatureNotIndexed(f"Feature {feature.key} is not in the activation index")
        return summary

    def features(self) -> list[FeatureRef]:
        return sorted((s.feature for s in self.summaries.values()), key=FeatureRef.sort_key)

    def ordered(self) -> list[FeatureActivationSummary]:
        return [self.summaries[f.key] for f in self.features()]

    def save(self, store: JsonlStore) -> int:
        return store.write_all(self.ordered())

    @classmethod
    def load(cls, store: JsonlStore) -> "ActivationIndex":
        return cls(store.read())


def top_sequences(index: ActivationIndex, feature: FeatureRef, n: int) -> list[ActivationRecord]:
    records = sorted(index.get(feature).top_records, key=ActivationRecord.sort_key)
    return records[: max(n, 0)]


def is_dead(index: ActivationIndex, feature: FeatureRef, threshold: float = 0.0) -> bool:
    return index.get(feature).corpus_max <= threshold


class IndexController:
    """
    Builds the activation index for a set of features over a tokenized corpus.
    The first pass collects top records, density and the corpus max; the band
    pass re-streams the corpus for features that fired and fills the quantile
    reservoirs against the now known max.
    """

    def __init__(self, model: Model, registry: FeaturizerRegistry, config: IndexConfig, seed: int = 0):
        self.model = model
        self.registry = registry
        self.config = config
        self.seed = seed

    def _scan(self, sinks: dict[str, Any], sequences: Sequence[CorpusSequence]) -> dict[str, Any]:
        """Feeds BOS-stripped activations of every feature in `sinks` to its `add`."""
        groups: dict[tuple, list] = defaultdict(list)
        for sink in sinks.values():
            groups[(sink.feature.site, sink.feature.featurizer)].append(sink)
        sites = {site for site, _ in groups}
        batch = self.config.batch_size
        for start in range(0, len(sequences), batch):
            chunk = sequences[start:start + batch]
            out = self.model.forward([s.tokens for s in chunk], capture=sites)
            for (site, name), members in groups.items():
                featurizer = self.registry.get(name, site)
                acts = featurizer.encode(out.captures[site])      # [B, T, k]
                for row, seq in enumerate(chunk):
                    seq_acts = acts[row, 1: len(seq.tokens)]
                    for sink in members:
                        sink.add(seq.doc_id, seq.tokens[1:], seq_acts[:, sink.feature.index])
        return sinks

    def _sharded(self, make_sinks, sequences: Sequence[CorpusSequence], workers: int, progress: bool, desc: str) -> dict:
        n_shards = max(1, min(workers, len(sequences)))
        shards = [sequences[i::n_shards] for i in range(n_shards)]
        if n_shards == 1:
            partials = [self._scan(make_sinks(), shards[0])]
        else:
            with ThreadPoolExecutor(max_workers=n_shards) as pool:
                partials = list(tqdm(
                    pool.map(lambda shard: self._scan(make_sinks(), shard), shards),
                    total=n_shards, desc=desc, disable=not progress,
                ))
        merged = partials[0]
        for partial in partials[1:]:
            for key, sink in partial.items():
                merged[key].merge(sink)
        return merged

    def build(
        self,
        features: Sequence[FeatureRef],
        sequences: Sequence[CorpusSequence],
        workers: int = 1,
        progress: bool = False,
    ) -> ActivationIndex:
        if not sequences:
            raise EmptyCorpus("No sequences to index")
        for f in features:
            self.registry.for_feature(f)
        logger.info(f"Indexing {len(features)} features over {len(sequences)} sequences")
        accumulators = self._sharded(
            lambda: {f.key: FeatureAccumulator(f, self.config.k_top) for f in features},
            sequences, workers, progress, "index pass",
        )
        live = [acc for acc in accumulators.values() if acc.corpus_max > 0]
        samplers: dict[str, BandSampler] = {}
        if live and self.config.samples_per_band > 0:
            logger.debug(f"Band pass over {len(live)} live features")
            samplers = self._sharded(
                lambda: {
                    acc.feature.key: acc.band_sampler(self.config.n_bands, self.config.samples_per_band, self.seed)
                    for acc in live
                },
                sequences, workers, progress, "band pass",
            )
        return ActivationIndex(
            acc.finalize(self.config.n_bands, samplers.get(key)) for key, acc in accumulators.items()
        )


def build_index(
    model: Model,
    registry: FeaturizerRegistry,
    features: Sequence[FeatureRef],
    sequences: Sequence[CorpusSequence],
    config: Optional[IndexConfig] = None,
    seed: int = 0,
    workers: int = 1,
) -> ActivationIndex:
    return IndexController(model, registry, config or IndexConfig(), seed).build(features, sequences, workers)

