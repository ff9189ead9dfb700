"""Chat-completion clients for the policy model and the judges."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

import httpx

Message = dict[str, Any]


class PolicyUnavailable(Exception):
    """Transport failure talking to a chat endpoint."""


class ChatClient(Protocol):
    def complete(self, messages: list[Message], **params: Any) -> str: ...


@dataclass
class HttpChatClient:
    """OpenAI-style ``/chat/completions`` endpoint.

    Request: ``{"model", "messages", **params}``; the reply text is read from
    ``choices[0].message.content``.
    """

    url: str
    model: str = "default"
    api_key: str | None = None
    timeout: float = 120.0
    retries: int = 2
    backoff: float = 1.0
    client: httpx.Client | None = None

    def __post_init__(self) -> None:
        if self.client is None:
            headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
            self.client = httpx.Client(timeout=self.timeout, headers=headers)

    def complete(self, messages: list[Message], **params: Any) -> str:
        body = {"model": self.model, "messages": messages, **params}
        last = "no attempt made"
        for attempt in range(self.retries + 1):
            try:
                resp = self.client.post(self.url, json=body)
                if resp.status_code >= 400:
                    last = f"HTTP {resp.status_code}"
                else:
                    content = resp.json()["choices"][0]["message"]["content"]
                    if isinstance(content, str):
                        return content
                    last = "non-string message content"
            except httpx.HTTPError as exc:
                last = f"{type(exc).__name__}: {exc}"
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                last = f"malformed completion: {exc}"
            if attempt < self.retries:
                time.sleep(self.backoff * 2**attempt)
        raise PolicyUnavailable(f"{self.url}: {last}")


def first_user_text(messages: Sequence[Message]) -> str:
    for m in messages:
        if m.get("role") == "user":
            content = m.get("content", "")
            if isinstance(content, str):
                return content
            return "".join(part.get("text", "") for part in content if isinstance(part, dict))
    return ""


class ScriptedPolicy:
    """Replays canned responses keyed by the episode's user prompt.

    The n-th assistant turn of an episode gets the n-th scripted response, so
    one instance can serve many concurrent episodes.
    """

    def __init__(self, scripts: Mapping[str, Sequence[str]] | Sequence[str], repeat_last: bool = False):
        if isinstance(scripts, Mapping):
            self.scripts = {k: list(v) for k, v in scripts.items()}
            self.default: list[str] | None = None
        else:
            self.scripts = {}
            self.default = list(scripts)
        self.repeat_last = repeat_last

    @classmethod
    def from_dir(cls, root: str | Path) -> ScriptedPolicy:
        doc = json.loads((Path(root) / "policy.json").read_text(encoding="utf-8"))
        return cls(doc["scripts"], repeat_last=bool(doc.get("repeat_last", False)))

    def complete(self, messages: list[Message], **params: Any) -> str:
        prompt = first_user_text(messages)
        script = self.scripts.get(prompt, self.default)
        if not script:
            raise PolicyUnavailable(f"no script for prompt {prompt[:60]!r}")
        turn = sum(1 for m in messages if m.get("role") == "assistant")
        if turn >= len(script):
            if not self.repeat_last:
                raise PolicyUnavailable("script exhausted")
            turn = len(script) - 1
        return script[turn]


class CallablePolicy:
    def __init__(self, fn: Callable[[list[Message]], str]):
        self.fn = fn

    def complete(self, messages: list[Message], **params: Any) -> str:
        return self.fn(messages)
