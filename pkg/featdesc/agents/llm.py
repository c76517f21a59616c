import json
import logging
import os
import threading
import time
from concurrent.futures import Future
from pathlib import Path
from typing import Callable, Optional, Protocol

import httpx
from tenacity import RetryError, Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from featdesc.agents.mock_llm import MockBackend
from featdesc.agents.schemas import ChatRequest
from featdesc.db_utility.jsonl_store import RunClock
from featdesc.exceptions import GatewayConfigError, GatewayRequestError, GatewayTransportError
from featdesc.models.config import GatewayConfig, RoleClass
from featdesc.utility.rate_limit import SlidingWindowLimiter

logger = logging.getLogger(__name__)


class ChatBackend(Protocol):
    transport: str

    def model_name(self, role: RoleClass) -> str: ...

    def send(self, request: ChatRequest) -> str: ...


class _Retryable(Exception):
    """Transport failure, 5xx or 429: worth another attempt."""


class HttpBackend:
    """Chat-completion client: POST {model, messages, temperature, max_tokens} -> choices[0].message.content."""

    transport = "http"

    def __init__(
        self,
        config: GatewayConfig,
        limiter: Optional[SlidingWindowLimiter] = None,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self.api_keys = {}
        for role, endpoint in config.roles.items():
            key = os.getenv(endpoint.api_key_env)
            if not key:
                raise GatewayConfigError(
                    f"Environment variable {endpoint.api_key_env} is not set (needed by the {role.value} endpoint)"
                )
            self.api_keys[role] = key
        self.limiter = limiter or SlidingWindowLimiter(config.rate_limit_rpm)
        self.client = httpx.Client(timeout=config.timeout, transport=transport)
        self.sleep = sleep
        self.calls = 0
        self._lock = threading.Lock()

    def model_name(self, role: RoleClass) -> str:
        return self.config.roles[role].model

    def _post_once(self, request: ChatRequest) -> str:
        endpoint = self.config.roles[request.role_class]
        payload = {
            "model": endpoint.model,
            "messages": [m.model_dump() for m in request.messages],
            "temperature": request.decoding.temperature,
            "max_tokens": request.decoding.max_tokens,
        }
        self.limiter.acquire()
        with self._lock:
            self.calls += 1
        try:
            response = self.client.post(
                endpoint.url,
                json=payload,
                headers={"Authorization": f"Bearer {self.api_keys[request.role_class]}"},
            )
        except httpx.TransportError as e:
            logger.warning(f"Transport error calling {endpoint.url}: {e}")
            raise _Retryable(str(e)) from e
        if response.status_code == 429 or response.status_code >= 500:
            logger.warning(f"{endpoint.url} answered {response.status_code}, retrying")
            raise _Retryable(f"HTTP {response.status_code}: {response.text[:200]}")
        if response.status_code >= 400:
            raise GatewayRequestError(response.status_code, response.text)
        try:
            return response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise GatewayRequestError(response.status_code, f"malformed completion body: {response.text[:200]}") from e

    def send(self, request: ChatRequest) -> str:
        policy = self.config.retry
        retrying = Retrying(
            stop=stop_after_attempt(policy.max_attempts),
            wait=wait_exponential(multiplier=policy.backoff_initial, max=policy.backoff_max),
            retry=retry_if_exception_type(_Retryable),
            sleep=self.sleep,
        )
        try:
            return retrying(self._post_once, request)
        except RetryError as e:
            last = e.last_attempt.exception()
            raise GatewayTransportError(
                f"{request.role_class.value} request failed after {policy.max_attempts} attempts: {last}"
            ) from last


class LLMGateway:
    """
    Single entry point for explainer, sentence-generator and judge calls.
    Responses are cached in memory and, when `cache_dir` is set, on disk as
    `<key>.json`. Concurrent identical requests share one backend call.
    """

    def __init__(self, config: GatewayConfig, backend: Optional[ChatBackend] = None, clock: Optional[RunClock] = None):
        self.config = config
        self.backend = backend or self._make_backend(config)
        self.clock = clock or RunClock()
        self.cache_dir = Path(config.cache_dir) if config.cache_dir else None
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._memory: dict[str, str] = {}
        self._inflight: dict[str, Future] = {}
        self._lock = threading.Lock()
        self.cache_hits = 0
        self.cache_misses = 0

    @staticmethod
    def _make_backend(config: GatewayConfig) -> ChatBackend:
        if config.backend == "mock":
            return MockBackend(judge_mode=config.mock_judge)
        return HttpBackend(config)

    @property
    def network_calls(self) -> int:
        return self.backend.calls if self.backend.transport == "http" else 0

    @property
    def backend_calls(self) -> int:
        return self.backend.calls

    def model_name(self, role: RoleClass) -> str:
        return self.backend.model_name(role)

    def _disk_path(self, key: str) -> Optional[Path]:
        return self.cache_dir / f"{key}.json" if self.cache_dir else None

    def _lookup(self, key: str) -> Optional[str]:
        if key in self._memory:
            return self._memory[key]
        path = self._disk_path(key)
        if path and path.exists():
            with open(path, "r", encoding="utf-8") as f:
                response = json.load(f)["response"]
            self._memory[key] = response
            return response
        return None

    def _store(self, key: str, request: ChatRequest, response: str) -> None:
        self._memory[key] = response
        path = self._disk_path(key)
        if path:
            entry = {
                "request": request.model_dump(mode="json"),
                "model": self.model_name(request.role_class),
                "response": response,
                "timestamp": self.clock.now().isoformat(),
            }
            tmp = path.with_suffix(".tmp")
            with open(tmp, "w", encoding="utf-8") as f:
                json.dump(entry, f, indent=2, sort_keys=True)
            tmp.replace(path)

    def complete(self, request: ChatRequest) -> str:
        key = request.cache_key(self.model_name(request.role_class))
        with self._lock:
            cached = self._lookup(key)
            if cached is not None:
                self.cache_hits += 1
                logger.debug(f"Cache hit {key[:10]} ({request.role_class.value})")
                return cached
            future = self._inflight.get(key)
            owner = future is None
            if owner:
                future = Future()
                self._inflight[key] = future
                self.cache_misses += 1
        if not owner:
            return future.result()

        logger.debug(f"Cache miss {key[:10]} ({request.role_class.value})")
        try:
            response = self.backend.send(request)
            with self._lock:
                self._store(key, request, response)
            future.set_result(response)
            return response
        except BaseException as e:
            future.set_exception(e)
            raise
        finally:
            with self._lock:
                self._inflight.pop(key, None)
