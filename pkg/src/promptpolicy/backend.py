"""Environment port and the live adapter for OpenAI-compatible endpoints.

The trainer only ever talks to an ``EnvironmentPort``. ``SyntheticEnvironment``
(in ``synthenv``) is the default implementation; ``LiveEnvironment`` executes
real prompt strategies over HTTP. The live adapter is not idempotent: the same
query and strategy can yield a different outcome on each call.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
from collections import Counter, defaultdict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Callable, Protocol, Sequence, runtime_checkable

import httpx
import numpy as np

from .domain import DEFAULT_LIBRARY, Outcome, QueryState, StrategyLibrary

log = logging.getLogger(__name__)


@runtime_checkable
class EnvironmentPort(Protocol):
    feature_dim: int
    n_actions: int

    def next_query(self) -> QueryState: ...

    def execute(self, query: QueryState, action: int) -> Outcome: ...


class TransportError(RuntimeError):
    """The endpoint could not be reached or kept failing after retries."""


class RateLimitError(TransportError):
    pass


DEFAULT_ANSWER_PATTERN = r"-?\d[\d,]*(?:\.\d+)?"


@dataclass(frozen=True)
class PromptTemplate:
    strategy_id: int
    system: str
    user: str  # must contain "{query}"
    n_samples: int = 1
    temperature: float = 0.0
    answer_pattern: str = DEFAULT_ANSWER_PATTERN  # the last match in the completion is the answer

    def __post_init__(self):
        if "{query}" not in self.user:
            raise ValueError("user template needs a {query} placeholder")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")

    def render(self, query_text: str) -> list[dict]:
        return [
            {"role": "system", "content": self.system},
            {"role": "user", "content": self.user.replace("{query}", query_text)},
        ]


_FEW_SHOT = (
    "Q: Tom has 3 apples and buys 4 more. How many apples does he have?\nA: 7\n\n"
    "Q: A book costs 12 dollars. How much do 3 books cost?\nA: 36\n\n"
)

_TEMPLATE_TEXT = {
    "ZS": ("Answer with the final number only.", "Q: {query}\nA:", 0.0),
    "FS": ("Answer with the final number only.", _FEW_SHOT + "Q: {query}\nA:", 0.0),
    "CoT": ("Solve the problem step by step, then give the final number on the last line.",
            "Q: {query}\nLet's think step by step.", 0.0),
    "GFP": ("First list the missing facts needed to solve the problem as hints, then use the hints to "
            "solve it. Give the final number on the last line.", "Q: {query}\nHints:", 0.0),
    "SC": ("Solve the problem step by step, then give the final number on the last line.",
           "Q: {query}\nLet's think step by step.", 0.7),
}


def default_templates(library: StrategyLibrary = DEFAULT_LIBRARY) -> list[PromptTemplate]:
    out = []
    for s in library:
        system, user, temp = _TEMPLATE_TEXT.get(s.name, _TEMPLATE_TEXT["ZS"])
        out.append(PromptTemplate(s.id, system, user, s.samples, temp))
    return out


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = "http://localhost:8000/v1"
    model: str = "default"
    api_key_env: str = "PPN_API_KEY"
    timeout: float = 60.0
    max_attempts: int = 3
    backoff_base: float = 0.5
    backoff_cap: float = 8.0
    max_concurrency: int = 4

    @classmethod
    def from_env(cls, **overrides) -> "EndpointConfig":
        kwargs = {}
        if "PPN_BASE_URL" in os.environ:
            kwargs["base_url"] = os.environ["PPN_BASE_URL"]
        if "PPN_MODEL" in os.environ:
            kwargs["model"] = os.environ["PPN_MODEL"]
        kwargs.update(overrides)
        return cls(**kwargs)

    @property
    def api_key(self) -> str | None:
        return os.environ.get(self.api_key_env)


class HTTPBackend:
    """Thin JSON-over-HTTP client with capped exponential backoff."""

    def __init__(self, config: EndpointConfig, client: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        headers = {"Authorization": f"Bearer {config.api_key}"} if config.api_key else {}
        self._client = client or httpx.Client(base_url=config.base_url, timeout=config.timeout, headers=headers)
        self._sleep = sleep

    def post(self, path: str, body: dict) -> dict:
        last: Exception | None = None
        for attempt in range(self.config.max_attempts):
            if attempt:
                self._sleep(min(self.config.backoff_cap, self.config.backoff_base * 2 ** (attempt - 1)))
            try:
                resp = self._client.post(path, json=body)
            except httpx.TransportError as exc:
                last = TransportError(f"POST {path}: {exc}")
                continue
            if resp.status_code == 429:
                last = RateLimitError(f"POST {path}: rate limited")
                continue
            if resp.status_code >= 500:
                last = TransportError(f"POST {path}: HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise TransportError(f"POST {path}: HTTP {resp.status_code}: {resp.text[:200]}")
            return resp.json()
        assert last is not None
        raise last

    def chat(self, messages: list[dict], temperature: float, sample_index: int = 0) -> tuple[str, int]:
        """One completion; returns (text, generated token count)."""
        body = {"model": self.config.model, "messages": messages, "temperature": temperature, "seed": sample_index}
        data = self.post("/chat/completions", body)
        text = data["choices"][0]["message"]["content"] or ""
        tokens = int(data.get("usage", {}).get("completion_tokens", 0))
        return text, tokens

    def embed(self, text: str, model: str) -> np.ndarray:
        data = self.post("/embeddings", {"model": model, "input": text})
        return np.asarray(data["data"][0]["embedding"], dtype=np.float64)


def normalize_number(text: str) -> str | None:
    try:
        value = Decimal(text.replace(",", ""))
    except InvalidOperation:
        return None
    if value == value.to_integral_value():
        return str(value.to_integral_value())
    return str(value.normalize())


def extract_answer(completion: str, pattern: str = DEFAULT_ANSWER_PATTERN) -> str | None:
    matches = re.findall(pattern, completion)
    return normalize_number(matches[-1]) if matches else None


def majority_vote(answers: Sequence[str | None]) -> str | None:
    """Most frequent non-missing answer; ties go to the answer seen first."""
    valid = [a for a in answers if a is not None]
    if not valid:
        return None
    counts = Counter(valid)
    top = max(counts.values())
    return next(a for a in valid if counts[a] == top)


def exact_numeric_grader(answer: str | None, truth: str) -> bool:
    return answer is not None and answer == normalize_number(str(truth))


class CostAnchor:
    """Zero-Shot token count used as the unit of cost: mean of the first ``window`` ZS calls."""

    def __init__(self, window: int = 50, fixed: float | None = None):
        self.window = window
        self._samples: list[int] = []
        self._fixed = fixed

    def observe(self, zs_tokens: int) -> None:
        if self._fixed is None and len(self._samples) < self.window:
            self._samples.append(max(int(zs_tokens), 1))

    @property
    def ready(self) -> bool:
        return self._fixed is not None or bool(self._samples)

    @property
    def value(self) -> float:
        if self._fixed is not None:
            return float(self._fixed)
        if not self._samples:
            raise ValueError("cost anchor has no Zero-Shot measurements yet")
        return float(np.mean(self._samples))


@dataclass
class LiveResult:
    outcome: Outcome
    answers: list[str | None]
    final_answer: str | None
    tokens: int
    extraction_failed: bool


def live_execute(
    backend: HTTPBackend,
    template: PromptTemplate,
    query_text: str,
    grader: Callable[[str | None], bool],
    anchor: CostAnchor,
    is_anchor_strategy: bool = False,
) -> LiveResult:
    """Run one strategy on one query: ``n_samples`` completions, majority vote, grade, normalize cost."""
    messages = template.render(query_text)
    n = template.n_samples
    if n == 1:
        results = [backend.chat(messages, template.temperature, 0)]
    else:
        with ThreadPoolExecutor(max_workers=min(n, backend.config.max_concurrency)) as pool:
            results = list(pool.map(lambda k: backend.chat(messages, template.temperature, k), range(n)))
    answers = [extract_answer(text, template.answer_pattern) for text, _ in results]
    tokens = sum(t for _, t in results)
    final = majority_vote(answers)
    if final is None:
        log.warning("answer extraction failed for strategy %d", template.strategy_id)
    if is_anchor_strategy:
        anchor.observe(tokens)
    accuracy = int(final is not None and bool(grader(final)))
    cost = max(tokens, 1) / anchor.value
    return LiveResult(Outcome(accuracy, cost), answers, final, tokens, final is None)


@dataclass(frozen=True)
class EncoderConfig:
    model: str = "embedding"
    feature_dim: int = 16
    projection_seed: int = 0


class FeatureEncoder:
    """Embedding endpoint followed by a fixed random projection to ``feature_dim``."""

    def __init__(self, backend: HTTPBackend, config: EncoderConfig):
        self.backend = backend
        self.config = config
        self._projection: np.ndarray | None = None

    def projection(self, raw_dim: int) -> np.ndarray | None:
        """None means identity (raw size already equals feature_dim)."""
        if raw_dim == self.config.feature_dim:
            return None
        if self._projection is None or self._projection.shape[0] != raw_dim:
            rng = np.random.default_rng(self.config.projection_seed)
            self._projection = rng.standard_normal((raw_dim, self.config.feature_dim)) / np.sqrt(self.config.feature_dim)
        return self._projection

    def project(self, raw: np.ndarray) -> np.ndarray:
        proj = self.projection(len(raw))
        return raw.copy() if proj is None else raw @ proj

    def __call__(self, text: str) -> np.ndarray:
        return self.project(self.backend.embed(text, self.config.model))


def feature_encode(query_text: str, encoder: FeatureEncoder) -> np.ndarray:
    return encoder(query_text)


class LiveEnvironment:
    """EnvironmentPort over a real chat endpoint and a small labelled dataset.

    Queries cycle through ``dataset`` (text, ground-truth answer) in order;
    ``QueryState.seed`` and ``index`` are the dataset position.
    """

    def __init__(
        self,
        dataset: Sequence[tuple[str, str]],
        backend: HTTPBackend,
        encoder: FeatureEncoder,
        library: StrategyLibrary = DEFAULT_LIBRARY,
        templates: Sequence[PromptTemplate] | None = None,
        grader: Callable[[str | None, str], bool] = exact_numeric_grader,
        anchor: CostAnchor | None = None,
    ):
        if not dataset:
            raise ValueError("dataset must be nonempty")
        self.dataset = list(dataset)
        self.backend = backend
        self.encoder = encoder
        self.library = library
        self.templates = list(templates) if templates is not None else default_templates(library)
        for s, t in zip(library, self.templates):
            if t.n_samples != s.samples:
                raise ValueError(f"template for {s.name} has n_samples={t.n_samples}, strategy needs {s.samples}")
        self.grader = grader
        self.anchor = anchor or CostAnchor()
        self.anchor_action = library.index("ZS") if "ZS" in library.names else 0
        self._next = 0
        self.flags: list[dict] = []

    @property
    def feature_dim(self) -> int:
        return self.encoder.config.feature_dim

    @property
    def n_actions(self) -> int:
        return len(self.library)

    def next_query(self) -> QueryState:
        i = self._next
        self._next += 1
        text, _ = self.dataset[i % len(self.dataset)]
        return QueryState(latent_difficulty=None, features=self.encoder(text), seed=i, index=i)

    def execute(self, query: QueryState, action: int) -> Outcome:
        if not (0 <= action < self.n_actions):
            raise ValueError(f"unknown strategy id {action}")
        text, truth = self.dataset[query.index % len(self.dataset)]
        grade = lambda ans: self.grader(ans, truth)  # noqa: E731
        if not self.anchor.ready and action != self.anchor_action:
            # cost unit not measured yet: spend one Zero-Shot call on this query to measure it
            live_execute(self.backend, self.templates[self.anchor_action], text, grade, self.anchor, True)
        res = live_execute(self.backend, self.templates[action], text, grade, self.anchor,
                           action == self.anchor_action)
        if res.extraction_failed:
            self.flags.append({"index": query.index, "action": action, "reason": "extraction_failed"})
        return res.outcome

    def execute_batch(self, queries: Sequence[QueryState], actions: Sequence[int]) -> list[Outcome]:
        """Bounded-concurrency execution; results are returned in query order."""
        with ThreadPoolExecutor(max_workers=self.backend.config.max_concurrency) as pool:
            return list(pool.map(lambda qa: self.execute(*qa), zip(queries, actions)))


def _request_key(path: str, body: dict) -> str:
    return path.rstrip("/").split("/")[-1] + " " + json.dumps(body, sort_keys=True, separators=(",", ":"))


class ReplayTransport(httpx.MockTransport):
    """Serves recorded request/response pairs from a line-delimited JSON file.

    Each line is ``{"request": {"path": ..., "body": {...}}, "response":
    {"status": 200, "body": {...}}}``. Requests are matched on the final path
    segment and the canonical JSON body; repeated requests cycle through
    their recorded responses in file order. Unmatched requests get a 404.
    """

    def __init__(self, records: Sequence[dict]):
        self._responses: dict[str, deque] = defaultdict(deque)
        for rec in records:
            key = _request_key(rec["request"]["path"], rec["request"]["body"])
            self._responses[key].append(rec["response"])
        self.calls: list[str] = []
        super().__init__(self._handle)

    @classmethod
    def from_file(cls, path: str | Path) -> "ReplayTransport":
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])

    def _handle(self, request: httpx.Request) -> httpx.Response:
        key = _request_key(request.url.path, json.loads(request.content or b"{}"))
        self.calls.append(key)
        queue = self._responses.get(key)
        if not queue:
            return httpx.Response(404, json={"error": "no recorded response", "key": key})
        resp = queue[0]
        queue.rotate(-1)
        return httpx.Response(resp.get("status", 200), json=resp["body"])


def replay_client(path: str | Path, base_url: str = "http://replay.local/v1") -> httpx.Client:
    return httpx.Client(base_url=base_url, transport=ReplayTransport.from_file(path))
