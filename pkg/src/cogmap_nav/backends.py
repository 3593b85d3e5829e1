"""Decision backends: deterministic heuristic, scripted replay, chat-completions client."""

from __future__ import annotations

import json
import logging
import os
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Optional, Sequence

import httpx

from .errors import BackendError, ConfigurationError, ScriptExhaustedError
from .fsm_states import STATE_NAMES, CognitiveState, parse_state_name

log = logging.getLogger(__name__)


class ReplyParseError(ValueError):
    """A model reply did not contain a usable answer."""


@dataclass(frozen=True)
class CooccurrenceTable:
    """Goal category -> related room labels and object categories."""

    rooms: Mapping[str, tuple[str, ...]]
    objects: Mapping[str, tuple[str, ...]]

    @classmethod
    def load(cls, path: Optional[str] = None) -> "CooccurrenceTable":
        if path is None:
            text = resources.files("cogmap_nav").joinpath("data/cooccurrence.json").read_text("utf-8")
        else:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        doc = json.loads(text)
        rooms = {k: tuple(v.get("rooms", ())) for k, v in doc.items()}
        objects = {k: tuple(v.get("objects", ())) for k, v in doc.items()}
        return cls(rooms, objects)

    def related_rooms(self, goal: str) -> tuple[str, ...]:
        return self.rooms.get(goal, ())

    def related_objects(self, goal: str) -> tuple[str, ...]:
        return self.objects.get(goal, ())


@dataclass(frozen=True)
class HeuristicPolicy:
    confidence_threshold: float = 0.8
    min_viewpoints: int = 2
    cooccurrence: Optional[CooccurrenceTable] = None

    def __post_init__(self) -> None:
        if not 0.0 < self.confidence_threshold <= 1.0:
            raise ConfigurationError("confidence_threshold must lie in (0, 1]")
        if self.min_viewpoints < 1:
            raise ConfigurationError("min_viewpoints must be >= 1")


@dataclass(frozen=True)
class DecisionSummary:
    """What a backend may know beyond the prompt text, masked like the prompt."""

    target_id: Optional[int] = None
    target_confidence: float = 0.0
    target_viewpoints: int = 0
    target_new: bool = False
    verify_remaining: bool = False
    anchor_known: bool = False
    context_remaining: bool = False
    distances: Mapping[int, Optional[float]] = field(default_factory=dict)
    explored: Mapping[int, Optional[bool]] = field(default_factory=dict)


@dataclass(frozen=True)
class StateQuery:
    prompt: str
    current: CognitiveState
    enabled: frozenset
    summary: DecisionSummary = DecisionSummary()


@dataclass(frozen=True)
class LandmarkQuery:
    prompt: str
    state: CognitiveState
    candidates: tuple[int, ...]
    summary: DecisionSummary = DecisionSummary()


class DecisionBackend(ABC):
    name = "backend"

    @abstractmethod
    def next_state(self, query: StateQuery) -> CognitiveState:
        ...

    @abstractmethod
    def select_landmark(self, query: LandmarkQuery) -> int:
        ...


# -- heuristic ----------------------------------------------------------------

def heuristic_next_state(summary: DecisionSummary, policy: HeuristicPolicy,
                         cv_enabled: bool = True) -> CognitiveState:
    """Rule table standing in for the state-transition query.

    Without a verification state the viewpoint requirement drops to one view.
    Contextual search, like verification, is only proposed while it still has
    landmarks left to visit.
    """
    min_vp = policy.min_viewpoints if cv_enabled else 1
    if summary.target_id is not None:
        if summary.target_confidence >= policy.confidence_threshold and summary.target_viewpoints >= min_vp:
            return CognitiveState.TC
        if summary.verify_remaining:
            return CognitiveState.CV
        if summary.target_new:
            return CognitiveState.OT
    if summary.anchor_known and summary.context_remaining:
        return CognitiveState.CS
    return CognitiveState.BS


def heuristic_select_landmark(candidates: Mapping[int, Optional[float]], state: CognitiveState,
                              explored: Optional[Mapping[int, Optional[bool]]] = None) -> int:
    """Nearest candidate (ties: lowest id), preferring ones not yet explored."""
    if not candidates:
        raise BackendError("no candidates to choose from")
    ids = sorted(candidates)
    if state is CognitiveState.TC:
        return ids[0]
    if explored:
        fresh = [i for i in ids if explored.get(i) is False]
        if fresh:
            ids = fresh

    def key(i: int):
        d = candidates[i]
        return (0 if d is not None else 1, d if d is not None else 0.0, i)

    return min(ids, key=key)


class HeuristicBackend(DecisionBackend):
    name = "heuristic"

    def __init__(self, policy: HeuristicPolicy = HeuristicPolicy()) -> None:
        self.policy = policy

    def next_state(self, query: StateQuery) -> CognitiveState:
        return heuristic_next_state(query.summary, self.policy, CognitiveState.CV in query.enabled)

    def select_landmark(self, query: LandmarkQuery) -> int:
        dist = {c: query.summary.distances.get(c) for c in query.candidates}
        return heuristic_select_landmark(dist, query.state, query.summary.explored)


# -- replay -------------------------------------------------------------------

class ReplayBackend(DecisionBackend):
    """Plays back a fixed state script; landmark choices are scripted or lowest-id."""

    name = "replay"

    def __init__(self, states: Sequence[CognitiveState | str],
                 landmarks: Optional[Sequence[int]] = None) -> None:
        self.states = [s if isinstance(s, CognitiveState) else parse_state_name(s) for s in states]
        self.landmarks = list(landmarks) if landmarks is not None else None
        self._si = 0
        self._li = 0

    def next_state(self, query: StateQuery) -> CognitiveState:
        if self._si >= len(self.states):
            raise ScriptExhaustedError(f"state script ended after {len(self.states)} entries")
        s = self.states[self._si]
        self._si += 1
        return s

    def select_landmark(self, query: LandmarkQuery) -> int:
        if self.landmarks is None:
            return min(query.candidates)
        if self._li >= len(self.landmarks):
            raise ScriptExhaustedError(f"landmark script ended after {len(self.landmarks)} entries")
        lid = self.landmarks[self._li]
        self._li += 1
        return lid


class ValidatingBackend(DecisionBackend):
    """Rejects landmark answers outside the candidate set."""

    def __init__(self, inner: DecisionBackend) -> None:
        self.inner = inner
        self.name = inner.name

    def next_state(self, query: StateQuery) -> CognitiveState:
        s = self.inner.next_state(query)
        if not isinstance(s, CognitiveState):
            raise BackendError(f"backend returned a non-state value {s!r}")
        return s

    def select_landmark(self, query: LandmarkQuery) -> int:
        lid = self.inner.select_landmark(query)
        if lid not in query.candidates:
            raise BackendError(f"backend chose {lid}, not among candidates {list(query.candidates)}")
        return lid


# -- reply parsing --------------------------------------------------------------

def _state_patterns():
    pats = []
    for s in CognitiveState:
        words = r"\s+".join(STATE_NAMES[s].split())
        pats.append((re.compile(words, re.IGNORECASE), s))
        pats.append((re.compile(rf"\b{s.name}\b", re.IGNORECASE), s))
    return pats


_STATE_PATTERNS = _state_patterns()


def parse_state_reply(text: str) -> CognitiveState:
    """Earliest state name or abbreviation in ``text``."""
    best = None
    for pat, s in _STATE_PATTERNS:
        m = pat.search(text or "")
        if m and (best is None or m.start() < best[0]):
            best = (m.start(), s)
    if best is None:
        raise ReplyParseError(f"no cognitive state in reply {text[:80]!r}")
    return best[1]


def parse_landmark_reply(text: str, candidates) -> int:
    """First integer token of ``text`` that is one of ``candidates``."""
    allowed = set(candidates)
    for tok in re.findall(r"\d+", text or ""):
        v = int(tok)
        if v in allowed:
            return v
    raise ReplyParseError(f"no candidate id in reply {text[:80]!r}")


# -- remote ---------------------------------------------------------------------

SYSTEM_PROMPT = "You are the decision module of an object-search robot. Answer briefly."
CLARIFY_STATE = ("Your previous answer could not be read. Reply with exactly one of: "
                 "Broad Search, Contextual Search, Observe Target, Candidate Verification, "
                 "Target Confirmation.")
CLARIFY_LANDMARK = "Your previous answer could not be read. Reply with one candidate id and nothing else."


class ChatCompletionsBackend(DecisionBackend):
    """Client for any server speaking the chat-completions JSON shape.

    One parse retry per question; transport errors, non-2xx statuses and
    malformed JSON raise BackendError straight away. The underlying
    ``httpx.Client`` is thread-safe, so one instance may serve several episodes.
    """

    name = "llm"

    def __init__(self, base_url: str, model: str, api_key: Optional[str] = None,
                 temperature: float = 0.0, timeout: float = 60.0,
                 client: Optional[httpx.Client] = None) -> None:
        if not base_url:
            raise ConfigurationError("chat-completions base URL is empty")
        self.url = base_url.rstrip("/") + "/v1/chat/completions"
        self.model = model
        self.api_key = api_key
        self.temperature = temperature
        self.timeout = timeout
        self.client = client or httpx.Client(timeout=timeout)

    @classmethod
    def from_env(cls, **kwargs) -> "ChatCompletionsBackend":
        base = os.environ.get("COGNAV_LLM_BASE_URL", "")
        if not base:
            raise ConfigurationError("COGNAV_LLM_BASE_URL is not set")
        return cls(base, os.environ.get("COGNAV_LLM_MODEL", "gpt-4"),
                   os.environ.get("COGNAV_LLM_API_KEY") or None, **kwargs)

    def _complete(self, messages: list[dict]) -> str:
        payload = {"model": self.model, "temperature": self.temperature, "messages": messages}
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = self.client.post(self.url, json=payload, headers=headers, timeout=self.timeout)
        except httpx.HTTPError as exc:
            raise BackendError(f"request failed: {exc}") from exc
        if not 200 <= resp.status_code < 300:
            raise BackendError(f"server answered HTTP {resp.status_code}")
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError("malformed chat-completions response") from exc
        if not isinstance(content, str):
            raise BackendError("response content is not text")
        return content

    def _ask(self, prompt: str, parse, clarify: str):
        messages = [{"role": "system", "content": SYSTEM_PROMPT}, {"role": "user", "content": prompt}]
        reply = self._complete(messages)
        try:
            return parse(reply)
        except ReplyParseError:
            log.info("unparseable reply, retrying once")
        messages.append({"role": "user", "content": clarify})
        reply = self._complete(messages)
        try:
            return parse(reply)
        except ReplyParseError as exc:
            raise BackendError(f"unparseable reply after retry: {exc}") from exc

    def next_state(self, query: StateQuery) -> CognitiveState:
        return self._ask(query.prompt, parse_state_reply, CLARIFY_STATE)

    def select_landmark(self, query: LandmarkQuery) -> int:
        return self._ask(query.prompt, lambda t: parse_landmark_reply(t, query.candidates), CLARIFY_LANDMARK)

    def close(self) -> None:
        self.client.close()
