"""Round builders and scripted policies shared by the test modules."""

from __future__ import annotations

import json

from gensearch.clients import CallablePolicy, PolicyUnavailable
from gensearch.toolkit import MockToolBackend


def tool(name: str, think: str | None = "t", **arguments) -> str:
    body = json.dumps({"name": name, "arguments": arguments})
    head = f"<think>{think}</think>\n" if think is not None else ""
    return f"{head}<tool_call>\n{body}\n</tool_call>"


def answer(ids=("IMG_001",), prompt="a scene like the first reference image", think: str | None = "t") -> str:
    body = json.dumps({"gen_prompt": prompt, "reference_images": [{"img_id": i, "note": "n"} for i in ids]})
    head = f"<think>{think}</think>\n" if think is not None else ""
    return f"{head}<answer>\n{body}\n</answer>"


def images(n: int, prefix: str = "i") -> list[dict]:
    return [{"title": f"{prefix}{k}", "url": f"https://img.org/{prefix}{k}.jpg", "local_path": f"{prefix}{k}.jpg"}
            for k in range(n)]


def backend(n_images: int = 2) -> MockToolBackend:
    return MockToolBackend(
        search_results={"q": [{"title": "T", "url": "https://e.org/t", "snippet": "s"}]},
        image_results={"cat": images(n_images), "many": images(7, "m")},
        pages={"https://e.org/t": {"summary": "page"}},
    )


def assistant_turns(messages) -> int:
    return sum(1 for m in messages if m["role"] == "assistant")


def last_user(messages) -> str:
    return next(m["content"] for m in reversed(messages) if m["role"] == "user")


def always(response: str) -> CallablePolicy:
    return CallablePolicy(lambda messages: response)


class Unavailable:
    def complete(self, messages, **params):
        raise PolicyUnavailable("down")
