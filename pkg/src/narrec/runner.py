"""Run experiment grids against chat-completion backends.

Every (model, strategy, submission, repetition) cell produces exactly one row
in an append-only JSONL run log. Re-running a plan skips cells already in the
log, so an interrupted run resumes where it stopped.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Optional, Protocol, Sequence

import httpx

from narrec import __version__
from narrec.corpus import Submission
from narrec.prompting import ExampleSource, PromptTemplates, Strategy, render_bundle
from narrec.util import content_hash

logger = logging.getLogger(__name__)

SIZE_CATEGORIES = ("tiny", "small", "medium", "large")
BACKENDS = ("local_server", "hosted_api")
DEFAULT_API_KEY_ENV = "OPENAI_API_KEY"


def size_category_for(params_billions: float) -> str:
    if params_billions < 4:
        return "tiny"
    if params_billions < 10:
        return "small"
    if params_billions < 50:
        return "medium"
    return "large"


@dataclass(frozen=True)
class ModelSpec:
    name: str
    family: str
    size_category: str
    backend: str = "local_server"
    params_billions: Optional[float] = None
    # identifier sent on the wire, e.g. an Ollama tag; defaults to ``name``
    backend_model: Optional[str] = None
    base_url: Optional[str] = None

    def __post_init__(self):
        if self.size_category not in SIZE_CATEGORIES:
            raise ValueError(f"{self.name}: unknown size category {self.size_category!r}")
        if self.backend not in BACKENDS:
            raise ValueError(f"{self.name}: unknown backend {self.backend!r}")
        if self.params_billions is not None and size_category_for(self.params_billions) != self.size_category:
            raise ValueError(f"{self.name}: {self.params_billions}B parameters is not {self.size_category}")

    @property
    def wire_name(self) -> str:
        return self.backend_model or self.name


def model_registry() -> dict[str, ModelSpec]:
    """The 38 evaluated models with family, size category and parameter count."""
    text = (resources.files("narrec") / "assets" / "models.csv").read_text(encoding="utf-8")
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        params = float(row["params_billions"]) if row["params_billions"] else None
        out[row["name"]] = ModelSpec(row["name"], row["family"], row["size_category"], row["backend"], params)
    return out


@dataclass
class RunConfig:
    context_window_tokens: int = 4096
    max_response_tokens: int = 500
    repetitions: int = 3
    # per-strategy overrides, e.g. {"zero_shot": 30} for the variance study
    strategy_repetitions: dict[str, int] = field(default_factory=dict)
    max_in_flight: int = 4
    retry_limit: int = 3
    timeout_s: float = 60.0
    backoff_base_s: float = 1.0
    backoff_max_s: float = 30.0

    def repetitions_for(self, strategy: Strategy) -> int:
        return self.strategy_repetitions.get(strategy.id, self.strategy_repetitions.get(strategy.kind,
                                                                                         self.repetitions))


# ---------------------------------------------------------------------------
# backends

class BackendError(Exception):
    """A request that failed; ``kind`` is "transport", "timeout", "http" or "protocol"."""

    def __init__(self, kind: str, message: str, attempts: int = 1):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
        self.message = message
        self.attempts = attempts


class Backend(Protocol):
    def send(self, system_text: str, user_text: str, config: RunConfig) -> str: ...


class ChatBackend:
    """Chat-completion client for a local model server or a hosted API."""

    def __init__(self, model: str, base_url: str, kind: str = "local_server", api_key: Optional[str] = None,
                 path: Optional[str] = None, transport: Optional[httpx.BaseTransport] = None):
        self.model = model
        self.kind = kind
        self.url = base_url.rstrip("/") + (path or ("/api/chat" if kind == "local_server"
                                                    else "/v1/chat/completions"))
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(headers=headers, transport=transport)

    def payload(self, system_text: str, user_text: str, config: RunConfig) -> dict:
        body = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": system_text},
                {"role": "user", "content": user_text},
            ],
            "max_tokens": config.max_response_tokens,
            "stream": False,
        }
        if self.kind == "local_server":
            body["options"] = {"num_ctx": config.context_window_tokens,
                               "num_predict": config.max_response_tokens}
        return body

    def send(self, system_text: str, user_text: str, config: RunConfig) -> str:
        try:
            resp = self._client.post(self.url, json=self.payload(system_text, user_text, config),
                                     timeout=config.timeout_s)
        except httpx.TimeoutException as exc:
            raise BackendError("timeout", str(exc) or type(exc).__name__) from exc
        except httpx.TransportError as exc:
            raise BackendError("transport", str(exc) or type(exc).__name__) from exc
        if resp.status_code >= 400:
            raise BackendError("http", f"status {resp.status_code}: {resp.text[:200]}")
        try:
            data = resp.json()
        except ValueError as exc:
            raise BackendError("protocol", "response body is not JSON") from exc
        return extract_content(data)

    def close(self):
        self._client.close()


def extract_content(data: dict) -> str:
    """Assistant message text from an OpenAI-style or Ollama-style response."""
    try:
        if "choices" in data:
            content = data["choices"][0]["message"]["content"]
        else:
            content = data["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise BackendError("protocol", "no assistant message in response") from exc
    return content or ""


class ScriptedBackend:
    """Backend driven by a Python callable; for tests and dry runs."""

    def __init__(self, respond: Callable[[str, str], str]):
        self.respond = respond
        self.calls = 0
        self._lock = threading.Lock()

    def send(self, system_text: str, user_text: str, config: RunConfig) -> str:
        with self._lock:
            self.calls += 1
        return self.respond(system_text, user_text)


def make_backend(spec: ModelSpec, base_url: Optional[str] = None,
                 api_key_env: str = DEFAULT_API_KEY_ENV) -> ChatBackend:
    url = spec.base_url or base_url
    if url is None:
        url = "http://localhost:11434" if spec.backend == "local_server" else "https://api.openai.com"
    api_key = os.environ.get(api_key_env) if spec.backend == "hosted_api" else None
    return ChatBackend(spec.wire_name, url, spec.backend, api_key=api_key)


def _complete(backend: Backend, system_text: str, user_text: str, config: RunConfig,
              sleep: Callable[[float], None] = time.sleep) -> tuple[str, int]:
    attempt = 0
    while True:
        attempt += 1
        try:
            return backend.send(system_text, user_text, config), attempt
        except BackendError as exc:
            if attempt > config.retry_limit:
                exc.attempts = attempt
                raise
            delay = min(config.backoff_max_s, config.backoff_base_s * 2 ** (attempt - 1))
            logger.warning("request failed (%s), retry %d/%d in %.1fs", exc, attempt, config.retry_limit, delay)
            sleep(delay)


def complete(backend: Backend, system_text: str, user_text: str, config: RunConfig,
             sleep: Callable[[float], None] = time.sleep) -> str:
    """Raw assistant text; retries with exponential backoff, then raises BackendError."""
    text, attempts = _complete(backend, system_text, user_text, config, sleep)
    if attempts > 1:
        logger.info("request succeeded after %d retries", attempts - 1)
    return text


# ---------------------------------------------------------------------------
# run log

@dataclass
class RawResponse:
    model: str
    strategy: str
    submission_id: str
    repetition: int
    text: Optional[str]
    latency_ms: float
    timestamp: str
    prompt_hash: str
    attempts: int = 1
    error: Optional[dict] = None

    @property
    def key(self) -> tuple[str, str, str, int]:
        return self.model, self.strategy, self.submission_id, self.repetition

    @property
    def failed(self) -> bool:
        return self.error is not None


def read_log(path: str | Path, repair: bool = False) -> tuple[dict, list[RawResponse]]:
    """Header and rows of a run log.

    A torn final line (a crash mid-append) is ignored; with ``repair`` it is
    also cut from the file so the next append starts on a clean line.
    """
    path = Path(path)
    if not path.exists():
        return {}, []
    header: dict = {}
    rows: list[RawResponse] = []
    good_bytes = 0
    with open(path, "rb") as fh:
        data = fh.read()
    lines = data.split(b"\n")
    for i, raw in enumerate(lines):
        is_last = i == len(lines) - 1
        if not raw.strip():
            if not is_last:
                good_bytes += len(raw) + 1
            continue
        try:
            obj = json.loads(raw.decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError):
            if is_last:
                logger.warning("%s: ignoring torn final line", path)
                break
            raise ValueError(f"{path}:{i + 1}: corrupt run log line") from None
        if is_last:
            # complete JSON without trailing newline: keep it, add the newline on append
            good_bytes += len(raw)
        else:
            good_bytes += len(raw) + 1
        if "_header" in obj:
            header = obj["_header"]
        else:
            rows.append(RawResponse(**obj))
    if repair and good_bytes < len(data):
        with open(path, "r+b") as fh:
            fh.truncate(good_bytes)
    return header, rows


class LogWriter:
    """Single appender for a run log; each record is written and flushed as one line."""

    def __init__(self, path: str | Path, header: Optional[dict] = None):
        self.path = Path(path)
        new = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "a", encoding="utf-8")
        if not new:
            with open(self.path, "rb") as fh:
                fh.seek(-1, os.SEEK_END)
                if fh.read(1) != b"\n":
                    self._fh.write("\n")
        if new and header is not None:
            self._write({"_header": header})

    def _write(self, obj: dict):
        self._fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")
        self._fh.flush()

    def append(self, row: RawResponse):
        self._write(asdict(row))

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass(frozen=True)
class Cell:
    model: ModelSpec
    strategy: Strategy
    submission: Submission
    repetition: int

    @property
    def key(self) -> tuple[str, str, str, int]:
        return self.model.name, self.strategy.id, self.submission.id, self.repetition


def plan_cells(models: Sequence[ModelSpec], strategies: Sequence[Strategy],
               submissions: Sequence[Submission], config: RunConfig) -> list[Cell]:
    return [Cell(m, s, sub, rep)
            for m in models for s in strategies for sub in submissions
            for rep in range(config.repetitions_for(s))]


def _log_header(models, strategies, config: RunConfig) -> dict:
    return {
        "tool": "narrec",
        "version": __version__,
        "temperature": "backend default",
        "config": asdict(config),
        "models": [m.name for m in models],
        "strategies": [{"id": s.id, "seed": s.seed} for s in strategies],
    }


def run_plan(models: Sequence[ModelSpec], strategies: Sequence[Strategy], submissions: Sequence[Submission],
             config: RunConfig, log_path: str | Path, backends: Mapping[str, Backend],
             example_pool: Sequence[ExampleSource] = (), templates: Optional[PromptTemplates] = None,
             progress: Optional[Callable[[int, int], None]] = None,
             sleep: Callable[[float], None] = time.sleep) -> list[RawResponse]:
    """Fill every missing cell of the grid and return the complete log rows."""
    missing = [m.name for m in models if m.name not in backends]
    if missing:
        raise ValueError(f"no backend configured for models: {missing}")
    _, existing = read_log(log_path, repair=True)
    done = {row.key for row in existing}
    cells = plan_cells(models, strategies, submissions, config)
    todo = [c for c in cells if c.key not in done]
    total = len(cells)
    n_done = total - len(todo)
    logger.info("%d cells planned, %d already logged, %d to run", total, n_done, len(todo))

    gates = {m.name: threading.Semaphore(config.max_in_flight) for m in models}

    def execute(cell: Cell) -> RawResponse:
        bundle = render_bundle(cell.strategy, cell.submission, example_pool, cell.repetition, templates)
        phash = content_hash(bundle.system_text, bundle.user_text)
        start = time.perf_counter()
        text, error, attempts = None, None, 1
        with gates[cell.model.name]:
            try:
                text, attempts = _complete(backends[cell.model.name], bundle.system_text, bundle.user_text,
                                           config, sleep)
            except BackendError as exc:
                error, attempts = {"kind": exc.kind, "message": exc.message}, exc.attempts
            except Exception as exc:  # a broken backend must not abort the plan
                error = {"kind": "internal", "message": f"{type(exc).__name__}: {exc}"}
        latency = (time.perf_counter() - start) * 1000.0
        return RawResponse(cell.model.name, cell.strategy.id, cell.submission.id, cell.repetition, text,
                           round(latency, 3), dt.datetime.now(dt.timezone.utc).isoformat(), phash,
                           attempts, error)

    if todo:
        workers = max(1, config.max_in_flight * len(models))
        with LogWriter(log_path, _log_header(models, strategies, config)) as writer, \
                ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(execute, c) for c in todo]
            for fut in as_completed(futures):
                row = fut.result()
                writer.append(row)
                existing.append(row)
                n_done += 1
                if progress:
                    progress(n_done, total)
    return existing
