"""
Score generation backends (remote chat-completions endpoint or deterministic mocks), response parsing,
repair and re-ranking
"""
import asyncio
import hashlib
import json
import logging
import math
import os
import re

from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from types import TracebackType
from typing import AbstractSet, Any, Dict, FrozenSet, Iterator, List, Mapping, NamedTuple, Optional, Sequence, \
    Tuple, Type

import httpx

from .backbone import BackboneModel, CandidateList
from .promptgen import Prompt
from .retrieval import FilteredHistory

log = logging.getLogger(__name__)

__all__ = [
    "BackendKind", "GenBackendConfig", "Coverage", "ScoreMap", "GenerationJob",
    "ScoreBackend", "IdentityMockBackend", "SimilarityMockBackend", "ChatCompletionBackend",
    "GenerationError", "BackendUnreachableError", "GenerationTimeoutError", "RepairExhaustedError",
    "IncompleteScoresError", "ScoreParseError", "NoJsonFoundError", "NotAnObjectError",
    "create_backend", "generate_scores", "generate_many", "parse_score_json", "repair_scores", "rerank",
    "rescale_scores",
]

SCORE_MIN = 1.0
SCORE_MAX = 100.0
API_KEY_ENV = "RAGFORGET_API_KEY"
CHAT_COMPLETIONS_PATH = "/v1/chat/completions"
_INTEGER_KEY = re.compile(r"^\s*-?\d+\s*$")


class GenerationError(Exception):
    """Base class for generation errors"""


class BackendUnreachableError(GenerationError):
    """Raised when the remote endpoint cannot be reached or keeps failing"""


class GenerationTimeoutError(GenerationError):
    """Raised when every attempt against the remote endpoint timed out"""


class RepairExhaustedError(GenerationError):
    """Raised when missing scores cannot be filled from backbone scores"""


class IncompleteScoresError(GenerationError):

    def __init__(self, missing: AbstractSet[int]) -> None:
        super().__init__(f"no score for candidates {sorted(missing)}")
        self._missing = frozenset(missing)

    @property
    def missing(self) -> FrozenSet[int]:
        return self._missing


class ScoreParseError(GenerationError):
    """Base class for unusable model output"""


class NoJsonFoundError(ScoreParseError):
    """Raised when the reply holds no decodable {...} object"""


class NotAnObjectError(ScoreParseError):
    """Raised when the reply is JSON but not an object"""


class BackendKind(Enum):
    REMOTE = "remote"
    MOCK_IDENTITY = "mock_identity"
    MOCK_SIMILARITY = "mock_similarity"

    def __repr__(self) -> str:
        return self.value

    @classmethod
    def from_flag(cls, flag: str) -> "BackendKind":
        """accepts both "mock-identity" and "mock_identity" spellings"""
        return cls(flag.replace("-", "_"))


@dataclass(frozen=True)
class GenBackendConfig:
    kind: BackendKind = BackendKind.MOCK_IDENTITY
    endpoint_url: Optional[str] = None
    "base URL of an OpenAI-compatible server (required for the remote kind)"
    model_name: str = "llama3.1-8b"
    timeout: float = 60.0
    "seconds allowed per request"
    max_retries: int = 2
    "re-requests after a failed or incomplete reply"
    temperature: float = 0.0
    request_parallelism: int = 4
    "maximum requests in flight"
    retry_backoff: float = 0.5
    "seconds before the first re-request, doubled for each further one"

    def __post_init__(self) -> None:
        if self.kind is BackendKind.REMOTE and not self.endpoint_url:
            raise ValueError("the remote backend requires endpoint_url")
        if not self.timeout > 0:
            raise ValueError("timeout must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.request_parallelism < 1:
            raise ValueError("request_parallelism must be >= 1")
        if self.retry_backoff < 0:
            raise ValueError("retry_backoff must be >= 0")


class Coverage(Enum):
    COMPLETE = "complete"
    PARTIAL = "partial"
    "parser output with missing ids; must be repaired before re-ranking"
    REPAIRED = "repaired"

    def __repr__(self) -> str:
        return self.value


@dataclass(frozen=True)
class ScoreMap:
    """
    Candidate id → score in [1, 100]
    """
    scores: Mapping[int, float]
    coverage: Coverage
    raw_response_digest: str = ""
    "sha256 of the raw model reply, empty for mocks"
    missing: FrozenSet[int] = frozenset()
    "candidates without a parsed score (before repair)"
    unknown_ids: int = 0
    "ids in the reply that are not candidates"

    def __iter__(self) -> Iterator[int]:
        return iter(self.scores)


class GenerationJob(NamedTuple):
    prompt: Optional[Prompt]
    "None is accepted by the mocks, which never read the prompt"
    candidates: CandidateList
    history: FilteredHistory


def rescale_scores(values: Sequence[float]) -> List[float]:
    """
    Affine map onto [1, 100], the maximum going to 100; equal values (including a single one) all map to 100
    """
    if not values:
        return []
    low, high = min(values), max(values)
    if not high > low or not math.isfinite(high - low):
        return [SCORE_MAX] * len(values)
    return [SCORE_MIN + (SCORE_MAX - SCORE_MIN) * (v - low) / (high - low) for v in values]


def _json_objects(raw: str) -> Iterator[str]:
    """balanced {...} blocks of raw, in order of their opening brace, string literals respected"""
    for start in (i for i, ch in enumerate(raw) if ch == "{"):
        depth = 0
        in_string = False
        escaped = False
        for position in range(start, len(raw)):
            ch = raw[position]
            if in_string:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_string = False
            elif ch == '"':
                in_string = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    yield raw[start:position + 1]
                    break


def parse_score_json(raw: str, candidate_ids: AbstractSet[int]) -> ScoreMap:
    """
    Extract the first balanced {...} object of a model reply and read id → score pairs from it.  Ids may be
    strings or integers; ids outside the candidates are dropped and counted; scores are clamped to [1, 100].

    :return: COMPLETE map when every candidate has a score, PARTIAL otherwise (with `missing` filled in)
    :raises NotAnObjectError: if the whole reply is a JSON value other than an object
    :raises NoJsonFoundError: if no {...} block decodes to an object
    """
    digest = hashlib.sha256(raw.encode("utf-8")).hexdigest()
    try:
        whole = json.loads(raw)
    except (json.JSONDecodeError, ValueError):
        whole = None
    else:
        if not isinstance(whole, dict):
            raise NotAnObjectError(f"reply is a JSON {type(whole).__name__}, not an object")
    content: Optional[Dict[str, Any]] = whole
    if content is None:
        for block in _json_objects(raw):
            try:
                decoded = json.loads(block)
            except (json.JSONDecodeError, ValueError):
                continue
            if isinstance(decoded, dict):
                content = decoded
                break
    if content is None:
        raise NoJsonFoundError("no JSON object found in reply")

    scores: Dict[int, float] = {}
    unknown = 0
    for key, value in content.items():
        if not _INTEGER_KEY.match(str(key)) or int(key) not in candidate_ids:
            unknown += 1
            continue
        if isinstance(value, bool):
            continue
        try:
            number = float(value)
        except (TypeError, ValueError):
            continue
        if math.isfinite(number):
            scores[int(key)] = min(SCORE_MAX, max(SCORE_MIN, number))
    if unknown:
        log.warning("dropped %d ids that are not candidates", unknown)
    missing = frozenset(candidate_ids) - frozenset(scores)
    coverage = Coverage.COMPLETE if not missing else Coverage.PARTIAL
    return ScoreMap(scores, coverage, digest, missing, unknown)


def repair_scores(partial: ScoreMap, candidates: CandidateList) -> ScoreMap:
    """
    Fill missing candidates with their backbone score rescaled onto [1, 100]

    :raises RepairExhaustedError: if a missing candidate has no finite backbone score
    """
    missing = frozenset(candidates.items) - frozenset(partial.scores)
    if not missing:
        return partial
    fallback = dict(zip(candidates.items, rescale_scores(candidates.backbone_scores)))
    unusable = sorted(i for i in missing if not math.isfinite(candidates.score_of(i)))
    if unusable:
        raise RepairExhaustedError(f"no backbone score to repair candidates {unusable}")
    log.warning("user %d: repairing %d missing scores from backbone scores", candidates.user_id, len(missing))
    scores = {item: partial.scores[item] if item in partial.scores else fallback[item] for item in candidates.items}
    return ScoreMap(scores, Coverage.REPAIRED, partial.raw_response_digest, frozenset(missing), partial.unknown_ids)


def rerank(candidates: CandidateList, scores: ScoreMap) -> List[int]:
    """
    :return: candidates by score descending, equal scores keeping backbone order
    :raises IncompleteScoresError: if a candidate has no score or the map still awaits repair
    """
    missing = frozenset(candidates.items) - frozenset(scores.scores)
    if missing or scores.coverage is Coverage.PARTIAL:
        raise IncompleteScoresError(missing or scores.missing)
    return sorted(candidates.items, key=lambda item: -scores.scores[item])


class ScoreBackend(ABC):
    """
    Produces candidate scores for one prompt
    """

    @abstractmethod
    async def score(self, job: GenerationJob) -> ScoreMap:
        """
        :param job: prompt, candidate list and filtered history of one user
        :return: complete or repaired score map over the candidates
        """

    async def aclose(self) -> None:
        """release any held resources"""

    async def __aenter__(self) -> "ScoreBackend":
        return self

    async def __aexit__(self, exc_type: Optional[Type[BaseException]], exc_val: Optional[BaseException],
                        exc_tb: Optional[TracebackType]) -> None:
        await self.aclose()


class IdentityMockBackend(ScoreBackend):
    """
    Scores each candidate by its backbone score rescaled onto [1, 100], so re-ranking reproduces backbone order
    """

    async def score(self, job: GenerationJob) -> ScoreMap:
        candidates = job.candidates
        return ScoreMap(dict(zip(candidates.items, rescale_scores(candidates.backbone_scores))), Coverage.COMPLETE)


class SimilarityMockBackend(ScoreBackend):
    """
    Scores each candidate by the mean dot product between its embedding and the retained history's item
    embeddings, rescaled onto [1, 100].  Without any known history item it falls back to backbone scores.
    """

    def __init__(self, model: BackboneModel) -> None:
        self._model = model

    async def score(self, job: GenerationJob) -> ScoreMap:
        candidates = job.candidates
        known = [i for i in job.history.item_ids if self._model.has_item(i)]
        if not known:
            return await IdentityMockBackend().score(job)
        centroid = self._model.item_matrix(known).mean(axis=0)
        similarity = self._model.item_matrix(candidates.items) @ centroid
        return ScoreMap(dict(zip(candidates.items, rescale_scores(similarity.tolist()))), Coverage.COMPLETE)


class ChatCompletionBackend(ScoreBackend):
    """
    Client of an OpenAI-compatible `POST /v1/chat/completions` endpoint.  The prompt goes out as a single user
    message; the first choice's message content is parsed.  A reply that cannot be parsed or misses candidates
    is re-requested up to `max_retries` times, after which missing scores are repaired from backbone scores.
    At most `request_parallelism` requests are in flight at once.

    :param cfg: backend configuration, `endpoint_url` being the server base URL
    :param client: optional pre-built httpx client (closed by `aclose` only when created here; its own timeout
        applies instead of `cfg.timeout`)
    """

    def __init__(self, cfg: GenBackendConfig, client: Optional[httpx.AsyncClient] = None) -> None:
        if not cfg.endpoint_url:
            raise ValueError("the remote backend requires endpoint_url")
        self._cfg = cfg
        self._owns_client = client is None
        self._client = client or httpx.AsyncClient(timeout=httpx.Timeout(cfg.timeout))
        self._in_flight: Optional[asyncio.Semaphore] = None
        base = cfg.endpoint_url.rstrip("/")
        self._url = base if base.endswith("/chat/completions") else base + CHAT_COMPLETIONS_PATH

    @property
    def url(self) -> str:
        return self._url

    def request_body(self, prompt: Prompt) -> bytes:
        """
        :return: the exact bytes posted for a prompt
        """
        payload = {
            "model": self._cfg.model_name,
            "temperature": self._cfg.temperature,
            "messages": [{"role": "user", "content": prompt.text}],
        }
        return json.dumps(payload, ensure_ascii=False).encode("utf-8")

    def _request_slot(self) -> asyncio.Semaphore:
        # created on first use so it belongs to the running loop
        if self._in_flight is None:
            self._in_flight = asyncio.Semaphore(self._cfg.request_parallelism)
        return self._in_flight

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        return headers

    async def complete(self, prompt: Prompt) -> str:
        """
        One round trip
        :return: content of the first choice's message
        :raises GenerationTimeoutError: if no reply arrives within the configured timeout
        :raises BackendUnreachableError: on transport failures, error statuses or a malformed envelope
        """
        try:
            response = await asyncio.wait_for(
                self._client.post(self._url, content=self.request_body(prompt), headers=self._headers()),
                timeout=self._cfg.timeout)
        except (asyncio.TimeoutError, httpx.TimeoutException):
            raise GenerationTimeoutError(f"no reply from {self._url} within {self._cfg.timeout}s") from None
        except httpx.HTTPError as e:
            raise BackendUnreachableError(f"request to {self._url} failed: {e}") from e
        if response.status_code >= 400:
            raise BackendUnreachableError(f"{self._url} answered HTTP {response.status_code}")
        try:
            content = response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise BackendUnreachableError(f"{self._url} returned an unexpected payload") from e
        if not isinstance(content, str):
            raise BackendUnreachableError(f"{self._url} returned non-text message content")
        return content

    async def score(self, job: GenerationJob) -> ScoreMap:
        if job.prompt is None:
            raise ValueError("the remote backend needs a prompt")
        candidate_ids = frozenset(job.candidates.items)
        best: Optional[ScoreMap] = None
        failure: Optional[GenerationError] = None
        attempts = 1 + self._cfg.max_retries
        for attempt in range(attempts):
            if attempt:
                await asyncio.sleep(self._cfg.retry_backoff * 2 ** (attempt - 1))
            try:
                async with self._request_slot():
                    reply = await self.complete(job.prompt)
                parsed = parse_score_json(reply, candidate_ids)
            except (BackendUnreachableError, GenerationTimeoutError, ScoreParseError) as e:
                log.warning("user %d attempt %d/%d: %s", job.prompt.user_id, attempt + 1, attempts, e)
                failure = e
                continue
            if parsed.coverage is Coverage.COMPLETE:
                return parsed
            log.warning("user %d attempt %d/%d: reply misses %d candidates", job.prompt.user_id, attempt + 1,
                        attempts, len(parsed.missing))
            if best is None or len(parsed.scores) > len(best.scores):
                best = parsed
        if best is None:
            if isinstance(failure, (BackendUnreachableError, GenerationTimeoutError)):
                raise failure
            best = ScoreMap({}, Coverage.PARTIAL, missing=candidate_ids)
        return repair_scores(best, job.candidates)

    async def aclose(self) -> None:
        if self._owns_client:
            await self._client.aclose()


def create_backend(cfg: GenBackendConfig, model: Optional[BackboneModel] = None) -> ScoreBackend:
    """
    :raises ValueError: if the similarity mock is requested without a backbone model
    """
    if cfg.kind is BackendKind.REMOTE:
        return ChatCompletionBackend(cfg)
    if cfg.kind is BackendKind.MOCK_SIMILARITY:
        if model is None:
            raise ValueError("the similarity mock needs the backbone model")
        return SimilarityMockBackend(model)
    return IdentityMockBackend()


async def generate_many(backend: ScoreBackend, jobs: Sequence[GenerationJob],
                        parallelism: int = 1) -> Dict[int, ScoreMap]:
    """
    Score many users' jobs concurrently, at most `parallelism` in flight
    :return: user id → score map
    """
    semaphore = asyncio.Semaphore(max(1, parallelism))

    async def bounded(job: GenerationJob) -> Tuple[int, ScoreMap]:
        async with semaphore:
            return job.candidates.user_id, await backend.score(job)

    results = await asyncio.gather(*(bounded(job) for job in jobs))
    return dict(results)


def generate_scores(prompt: Prompt, cfg: GenBackendConfig, candidates: CandidateList, history: FilteredHistory,
                    model: Optional[BackboneModel] = None) -> ScoreMap:
    """
    Score a single prompt, run to completion on a fresh event loop
    """
    async def run() -> ScoreMap:
        async with create_backend(cfg, model) as backend:
            return await backend.score(GenerationJob(prompt, candidates, history))

    return asyncio.run(run())
