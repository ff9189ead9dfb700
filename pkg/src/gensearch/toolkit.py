"""Search tools, episode-scoped image ids, and the backends behind them.

Two backends ship here: :class:`MockToolBackend` replays JSON fixtures for
offline runs, :class:`HttpToolBackend` talks to JSON endpoints.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Any, Iterable, Protocol, Union
from urllib.parse import urlparse

import httpx

from .protocol import ImageId

log = logging.getLogger(__name__)

DEFAULT_TOP_K = 5


class ToolError(Exception):
    code = "ToolError"

    def __str__(self) -> str:
        msg = super().__str__()
        return f"{self.code}: {msg}" if msg else self.code


class BackendUnavailable(ToolError):
    code = "BackendUnavailable"


class EmptyQueryList(ToolError):
    code = "EmptyQueryList"


class EmptyQuery(ToolError):
    code = "EmptyQuery"


class InvalidUrl(ToolError):
    code = "InvalidUrl"


class PageFetchFailed(ToolError):
    code = "PageFetchFailed"


class InvalidArgument(ToolError):
    code = "InvalidArgument"


@dataclass(frozen=True)
class SearchResult:
    title: str
    url: str
    snippet: str

    def __post_init__(self) -> None:
        if not self.url:
            raise ValueError("SearchResult.url must be non-empty")


@dataclass(frozen=True)
class RawImage:
    """An image hit as returned by a backend, before an id is assigned."""

    title: str
    url: str
    local_path: str


@dataclass(frozen=True)
class ImageResult:
    img_id: ImageId
    title: str
    url: str
    local_path: str

    def to_dict(self) -> dict[str, Any]:
        return {"img_id": str(self.img_id), "title": self.title, "url": self.url, "local_path": self.local_path}


def _relative_path(path: str) -> str:
    p = PurePosixPath(path.replace("\\", "/"))
    if p.is_absolute():
        p = p.relative_to(p.anchor)
    return str(p)


@dataclass
class ImageRegistry:
    """Allocates ``IMG_###`` ids for one episode. Ids are never reissued."""

    next_ordinal: int = 1
    entries: dict[ImageId, ImageResult] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.next_ordinal < 1:
            raise ValueError("next_ordinal must be >= 1")

    def allocate(self, raw: RawImage) -> ImageResult:
        img_id = ImageId(self.next_ordinal)
        self.next_ordinal += 1
        result = ImageResult(img_id, raw.title, raw.url, _relative_path(raw.local_path))
        self.entries[img_id] = result
        return result

    def known_ids(self) -> frozenset[ImageId]:
        return frozenset(self.entries)

    def resolve(self, img_id: ImageId) -> ImageResult:
        return self.entries[img_id]


class ToolBackend(Protocol):
    def search(self, query: str, top_k: int) -> list[SearchResult]: ...

    def image_search(self, query: str, top_k: int) -> list[RawImage]: ...

    def browse(self, url: str, query: str) -> str: ...


# -- tool results and rendering -----------------------------------------------


@dataclass(frozen=True)
class SearchFeedback:
    results: tuple[tuple[str, tuple[SearchResult, ...]], ...]


@dataclass(frozen=True)
class ImageFeedback:
    query: str
    images: tuple[ImageResult, ...]


@dataclass(frozen=True)
class BrowseFeedback:
    url: str
    summary: str


@dataclass(frozen=True)
class ToolFailure:
    tool: str
    message: str


ToolOutput = Union[SearchFeedback, ImageFeedback, BrowseFeedback, ToolFailure]


def _one_line(text: str) -> str:
    return " ".join(text.split())


def render_tool_feedback(result: ToolOutput) -> str:
    lines: list[str] = []
    if isinstance(result, SearchFeedback):
        for query, hits in result.results:
            lines.append(f"Search results for: {_one_line(query)}")
            if not hits:
                lines.append("(no results)")
            for n, hit in enumerate(hits, 1):
                lines.append(f"{n}. {_one_line(hit.title)} | {hit.url} | {_one_line(hit.snippet)}")
    elif isinstance(result, ImageFeedback):
        lines.append(f"Image results for: {_one_line(result.query)}")
        if not result.images:
            lines.append("(no results)")
        for img in sorted(result.images, key=lambda r: r.img_id):
            lines.append(f"{img.img_id}: {_one_line(img.title)} | {img.url}")
    elif isinstance(result, BrowseFeedback):
        lines.append(f"Page summary for: {result.url}")
        lines.append(result.summary.strip())
    elif isinstance(result, ToolFailure):
        lines.append(f"tool error: {result.tool}: {_one_line(result.message)}")
    else:
        raise TypeError(f"cannot render {type(result).__name__}")
    return "\n".join(lines)


# -- tool operations -----------------------------------------------------------


def _check_top_k(top_k: Any) -> int:
    if isinstance(top_k, bool) or not isinstance(top_k, int) or top_k < 1:
        raise InvalidArgument(f"top_k must be a positive integer, got {top_k!r}")
    return top_k


def search(queries: list[str], backend: ToolBackend, top_k: int = DEFAULT_TOP_K) -> SearchFeedback:
    top_k = _check_top_k(top_k)
    if not queries:
        raise EmptyQueryList()
    out = []
    for q in queries:
        if not q.strip():
            raise EmptyQuery("blank entry in queries")
        out.append((q, tuple(backend.search(q, top_k)[:top_k])))
    return SearchFeedback(tuple(out))


def image_search(
    query: str,
    backend: ToolBackend,
    registry: ImageRegistry,
    top_k: int = DEFAULT_TOP_K,
    limit: int | None = None,
) -> ImageFeedback:
    """Fetch images and register each under a fresh id. ``limit`` is the per-turn cap."""
    top_k = _check_top_k(top_k)
    if not query.strip():
        raise EmptyQuery()
    keep = top_k if limit is None else min(top_k, limit)
    raws = backend.image_search(query, top_k)[:keep]
    return ImageFeedback(query, tuple(registry.allocate(raw) for raw in raws))


def check_url(url: str) -> str:
    parsed = urlparse(url)
    if parsed.scheme not in ("http", "https") or not parsed.netloc:
        raise InvalidUrl(repr(url))
    return url


def browse(url: str, query: str, backend: ToolBackend) -> BrowseFeedback:
    check_url(url)
    return BrowseFeedback(url, backend.browse(url, query))


def execute_tool(
    name: str,
    arguments: dict[str, Any],
    backend: ToolBackend,
    registry: ImageRegistry,
    image_limit: int | None = None,
) -> ToolOutput:
    """Run one tool call. Failures come back as :class:`ToolFailure`, never raised."""
    try:
        top_k = arguments.get("top_k", DEFAULT_TOP_K)
        if name == "search":
            return search(arguments["queries"], backend, top_k)
        if name == "image_search":
            return image_search(arguments["query"], backend, registry, top_k, image_limit)
        if name == "browse":
            return browse(arguments["url"], arguments["query"], backend)
        raise InvalidArgument(f"unknown tool {name!r}")
    except ToolError as exc:
        return ToolFailure(name, str(exc))
    except (KeyError, TypeError, AttributeError) as exc:
        return ToolFailure(name, f"InvalidArgument: {exc}")


# -- mock backend --------------------------------------------------------------


def normalize_query(query: str) -> str:
    return " ".join(query.lower().split())


class MockToolBackend:
    """Fixture-driven backend. See ``docs/fixtures.md`` for the file layout."""

    def __init__(
        self,
        search_results: dict[str, list[dict[str, str]]] | None = None,
        image_results: dict[str, list[dict[str, str]]] | None = None,
        pages: dict[str, dict[str, Any]] | None = None,
        unavailable: Iterable[str] = (),
    ):
        self._search = {normalize_query(k): v for k, v in (search_results or {}).items()}
        self._images = {normalize_query(k): v for k, v in (image_results or {}).items()}
        self._pages = dict(pages or {})
        self._unavailable = {normalize_query(q) for q in unavailable}

    @classmethod
    def from_dir(cls, root: str | os.PathLike[str]) -> MockToolBackend:
        tools = Path(root) / "tools"
        if not tools.is_dir():
            raise FileNotFoundError(f"no tools/ directory under {root}")

        def load(name: str) -> dict[str, Any]:
            path = tools / name
            if not path.exists():
                return {}
            return json.loads(path.read_text(encoding="utf-8"))

        s, i, b = load("search.json"), load("image_search.json"), load("browse.json")
        return cls(
            search_results=s.get("results", {}),
            image_results=i.get("results", {}),
            pages=b.get("pages", {}),
            unavailable=[*s.get("unavailable", []), *i.get("unavailable", [])],
        )

    def _check(self, query: str) -> str:
        key = normalize_query(query)
        if key in self._unavailable:
            raise BackendUnavailable(f"fixture marks {query!r} unavailable")
        return key

    def search(self, query: str, top_k: int) -> list[SearchResult]:
        rows = self._search.get(self._check(query), [])
        return [SearchResult(r["title"], r["url"], r.get("snippet", "")) for r in rows[:top_k]]

    def image_search(self, query: str, top_k: int) -> list[RawImage]:
        rows = self._images.get(self._check(query), [])
        return [RawImage(r.get("title", ""), r["url"], r.get("local_path", "")) for r in rows[:top_k]]

    def browse(self, url: str, query: str) -> str:
        page = self._pages.get(url)
        if page is None:
            raise PageFetchFailed(url)
        by_query = {normalize_query(k): v for k, v in page.get("by_query", {}).items()}
        return by_query.get(normalize_query(query), page.get("summary", ""))


# -- HTTP backend --------------------------------------------------------------


@dataclass
class HttpToolBackend:
    """JSON-over-HTTP tool endpoints; wire format in ``docs/fixtures.md``."""

    search_url: str
    image_url: str
    browse_url: str
    api_key: str | None = None
    timeout: float = 30.0
    retries: int = 2
    backoff: float = 0.5
    client: httpx.Client | None = None

    def __post_init__(self) -> None:
        if self.client is None:
            headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
            self.client = httpx.Client(timeout=self.timeout, headers=headers)

    def _post(self, url: str, payload: dict[str, Any]) -> httpx.Response:
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self.client.post(url, json=payload)
            except httpx.HTTPError as exc:
                last = exc
            else:
                if resp.status_code < 500 and resp.status_code != 429:
                    return resp
                last = BackendUnavailable(f"HTTP {resp.status_code} from {url}")
            if attempt < self.retries:
                time.sleep(self.backoff * 2**attempt)
        raise BackendUnavailable(str(last))

    def _json(self, url: str, payload: dict[str, Any]) -> dict[str, Any]:
        resp = self._post(url, payload)
        if resp.status_code >= 400:
            raise BackendUnavailable(f"HTTP {resp.status_code} from {url}")
        try:
            return resp.json()
        except ValueError as exc:
            raise BackendUnavailable(f"bad JSON from {url}: {exc}") from None

    def search(self, query: str, top_k: int) -> list[SearchResult]:
        doc = self._json(self.search_url, {"query": query, "top_k": top_k})
        try:
            return [SearchResult(r["title"], r["url"], r.get("snippet", "")) for r in doc["results"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendUnavailable(f"malformed search response: {exc}") from None

    def image_search(self, query: str, top_k: int) -> list[RawImage]:
        doc = self._json(self.image_url, {"query": query, "top_k": top_k})
        try:
            return [RawImage(r.get("title", ""), r["url"], r.get("local_path", "")) for r in doc["results"]]
        except (KeyError, TypeError) as exc:
            raise BackendUnavailable(f"malformed image_search response: {exc}") from None

    def browse(self, url: str, query: str) -> str:
        resp = self._post(self.browse_url, {"url": url, "query": query})
        if resp.status_code == 404:
            raise PageFetchFailed(url)
        if resp.status_code >= 400:
            raise BackendUnavailable(f"HTTP {resp.status_code} from {self.browse_url}")
        try:
            summary = resp.json()["summary"]
        except (ValueError, KeyError, TypeError) as exc:
            raise BackendUnavailable(f"malformed browse response: {exc}") from None
        if not isinstance(summary, str):
            raise BackendUnavailable("browse summary is not a string")
        return summary
