"""Pluggable chat backends for the graph augmenter and the explainer.

Three backends ship: ``stub`` (deterministic, offline; used by all tests),
``replay`` (JSONL transcript of prompt/response pairs) and ``http`` (generic
chat-completion endpoint configured through ``CKG_LLM_URL`` / ``CKG_LLM_KEY``).
A recording wrapper captures transcripts that ``replay`` can consume later.
"""

from __future__ import annotations

import json
import logging
import os
import random
import re
import threading
from typing import Callable, Protocol, Sequence

from .errors import BackendError, BudgetExceededError
from .rng import derive_seed

log = logging.getLogger(__name__)

ENV_URL = "CKG_LLM_URL"
ENV_KEY = "CKG_LLM_KEY"


class LLMBackend(Protocol):
    identifier: str

    def send(self, prompt: str) -> str: ...


class _Budgeted:
    """Base class enforcing an optional request budget (thread safe)."""

    identifier = "base"

    def __init__(self, budget: int | None = None) -> None:
        self.budget = budget
        self.requests_sent = 0
        self._lock = threading.Lock()

    def send(self, prompt: str) -> str:
        with self._lock:
            if self.budget is not None and self.requests_sent >= self.budget:
                raise BudgetExceededError(
                    f"{self.identifier}: request budget of {self.budget} exhausted"
                )
            self.requests_sent += 1
        return self._reply(prompt)

    def _reply(self, prompt: str) -> str:
        raise NotImplementedError


_FACT_LINE = re.compile(r"^\((?P<h>[^,()]+), (?P<r>[^,()]+), (?P<t>[^,()]+)\)$")


class StubBackend(_Budgeted):
    """Offline deterministic backend.

    With ``responses`` it replays a scripted list (exhaustion is a backend
    error); with ``responder`` it delegates to a callable. Otherwise it
    parses the fact lines out of the prompt and proposes a small seeded
    edit: delete one listed fact and add one recombined fact.
    """

    identifier = "stub"

    def __init__(
        self,
        responses: Sequence[str] | None = None,
        responder: Callable[[str], str] | None = None,
        seed: int = 0,
        budget: int | None = None,
    ) -> None:
        super().__init__(budget)
        self._responses = list(responses) if responses is not None else None
        self._responder = responder
        self._seed = seed
        self._cursor = 0

    def _reply(self, prompt: str) -> str:
        if self._responses is not None:
            with self._lock:
                if self._cursor >= len(self._responses):
                    raise BackendError("stub: scripted responses exhausted")
                out = self._responses[self._cursor]
                self._cursor += 1
            return out
        if self._responder is not None:
            return self._responder(prompt)
        return self._heuristic(prompt)

    def _heuristic(self, prompt: str) -> str:
        facts = []
        for line in prompt.splitlines():
            m = _FACT_LINE.match(line.strip())
            if m and m.group("r") != "interact":
                facts.append((m.group("h"), m.group("r"), m.group("t")))
        payload: dict[str, list] = {"add_ia": [], "del_ia": []}
        if "del_ui" in prompt:
            payload["del_ui"] = []
        if facts:
            rng = random.Random(derive_seed(self._seed, "stub", prompt))
            dropped = rng.choice(facts)
            payload["del_ia"] = [list(dropped)]
            donor = rng.choice(facts)
            recombined = [dropped[0], donor[1], donor[2]]
            if tuple(recombined) not in facts:
                payload["add_ia"] = [recombined]
        return json.dumps(payload)


class ReplayBackend(_Budgeted):
    """Replays a recorded JSONL transcript of {"prompt":..., "response":...}.

    The transcript carries the identity of the backend that produced it, so a
    replayed run is indistinguishable from the original (pool provenance
    included).
    """

    identifier = "replay"

    def __init__(self, path: str, budget: int | None = None) -> None:
        super().__init__(budget)
        self._by_prompt: dict[str, str] = {}
        try:
            with open(path, "r", encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    try:
                        rec = json.loads(line)
                        self._by_prompt[rec["prompt"]] = rec["response"]
                        if "backend" in rec:
                            self.identifier = str(rec["backend"])
                    except (json.JSONDecodeError, KeyError, TypeError) as exc:
                        raise BackendError(f"{path}:{lineno}: bad transcript record") from exc
        except OSError as exc:
            raise BackendError(f"replay transcript unreadable: {path}") from exc

    def _reply(self, prompt: str) -> str:
        try:
            return self._by_prompt[prompt]
        except KeyError:
            raise BackendError("replay: prompt not present in transcript") from None


class RecordingBackend:
    """Wraps another backend and appends every exchange to a JSONL transcript."""

    def __init__(self, inner: LLMBackend, path: str) -> None:
        self.inner = inner
        self.path = path
        self._lock = threading.Lock()

    @property
    def identifier(self) -> str:
        return self.inner.identifier

    def send(self, prompt: str) -> str:
        response = self.inner.send(prompt)
        record = {"prompt": prompt, "response": response, "backend": self.identifier}
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")
        return response


class HttpBackend(_Budgeted):
    """Generic chat-completion endpoint (OpenAI-style request body).

    URL and key come from arguments or the CKG_LLM_URL / CKG_LLM_KEY
    environment variables. Never used by the test suite.
    """

    identifier = "http"

    def __init__(
        self,
        url: str | None = None,
        key: str | None = None,
        model: str = "gpt-3.5-turbo",
        timeout: float = 60.0,
        budget: int | None = None,
    ) -> None:
        super().__init__(budget)
        self.url = url or os.environ.get(ENV_URL)
        self.key = key or os.environ.get(ENV_KEY)
        self.model = model
        self.timeout = timeout
        if not self.url:
            raise BackendError(f"http backend needs a URL ({ENV_URL} unset)")

    def _reply(self, prompt: str) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.key:
            headers["Authorization"] = f"Bearer {self.key}"
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        }
        try:
            resp = requests.post(self.url, json=body, headers=headers, timeout=self.timeout)
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except Exception as exc:
            raise BackendError(f"http backend request failed: {exc}") from exc


def make_backend(
    name: str,
    seed: int = 0,
    budget: int | None = None,
    replay_path: str | None = None,
    record_path: str | None = None,
) -> LLMBackend:
    if name == "stub":
        backend: LLMBackend = StubBackend(seed=seed, budget=budget)
    elif name == "replay":
        if not replay_path:
            raise BackendError("replay backend needs replay_path")
        backend = ReplayBackend(replay_path, budget=budget)
    elif name == "http":
        backend = HttpBackend(budget=budget)
    else:
        raise BackendError(f"unknown backend {name!r}")
    if record_path:
        backend = RecordingBackend(backend, record_path)
    return backend
