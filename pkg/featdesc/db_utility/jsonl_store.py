import hashlib
import json
import logging
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import Generic, Iterable, Optional, TypeVar

from pydantic import BaseModel

from featdesc.models import Description, EvalRecord, FeatureActivationSummary, RevivalResult

logger = logging.getLogger(__name__)

T = TypeVar("T", bound=BaseModel)

EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


class RunClock:
    """Timestamps for stored records; pinned to the epoch for reproducible runs."""

    def __init__(self, pinned: bool = False):
        self.pinned = pinned

    def now(self) -> datetime:
        return EPOCH if self.pinned else datetime.now(timezone.utc)


class JsonlStore(Generic[T]):
    """One pydantic record per line. Appends are serialized under a lock."""

    def __init__(self, path: Path, model_cls: type[T]):
        self.path = Path(path)
        self.model_cls = model_cls
        self._lock = threading.Lock()

    def exists(self) -> bool:
        return self.path.exists() and self.path.stat().st_size > 0

    @staticmethod
    def dumps(record: BaseModel) -> str:
        return record.model_dump_json(by_alias=True)

    def append(self, records: Iterable[T]) -> int:
        lines = [self.dumps(r) + "\n" for r in records]
        if not lines:
            return 0
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as f:
                f.writelines(lines)
        logger.debug(f"Appended {len(lines)} records to {self.path.name}")
        return len(lines)

    def write_all(self, records: Iterable[T]) -> int:
        with self._lock:
            if self.path.exists():
                self.path.unlink()
        return self.append(records)

    def read(self) -> list[T]:
        if not self.path.exists():
            return []
        with open(self.path, "r", encoding="utf-8") as f:
            return [self.model_cls.model_validate_json(line) for line in f if line.strip()]


class RunManifest(BaseModel):
    command: str
    config_hash: str
    seed: int
    template_versions: dict[str, str]
    package_version: str
    backend: str
    created_at: datetime


class RunStore:
    """Artifacts of one run under `output_dir`."""

    def __init__(self, output_dir: Path):
        self.root = Path(output_dir)
        self.index = JsonlStore(self.root / "index.jsonl", FeatureActivationSummary)
        self.descriptions = JsonlStore(self.root / "descriptions.jsonl", Description)
        self.evals = JsonlStore(self.root / "evals.jsonl", EvalRecord)
        self.revival = JsonlStore(self.root / "revival.jsonl", RevivalResult)
        self.manifest_path = self.root / "manifest.json"

    def write_manifest(self, manifest: RunManifest) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.manifest_path, "w", encoding="utf-8") as f:
            f.write(manifest.model_dump_json(indent=2))

    def read_manifest(self) -> Optional[RunManifest]:
        if not self.manifest_path.exists():
            return None
        return RunManifest.model_validate_json(self.manifest_path.read_text(encoding="utf-8"))


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode("utf-8")).hexdigest()
