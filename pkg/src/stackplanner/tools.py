"""Search tools (Wikipedia-style corpus search and web search) and dispatch."""

from __future__ import annotations

import concurrent.futures
import json
import math
import os
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import httpx

from .metrics import normalized_tokens

ENV_SEARCH_API_KEY = "STACKPLANNER_SEARCH_API_KEY"
ENV_SEARCH_BASE_URL = "STACKPLANNER_SEARCH_BASE_URL"

DEFAULT_TIMEOUT = 10.0


class ToolError(Exception):
    pass


class EmptyQuery(ToolError):
    pass


class ToolTimeout(ToolError):
    pass


@dataclass(frozen=True)
class ToolCall:
    tool: str
    args: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class SearchHit:
    title: str
    text: str
    url: str | None = None
    score: float = 0.0
    doc_id: str = ""

    def __post_init__(self):
        if not (self.title or self.text):
            raise ValueError("a hit needs a title or text")


class SearchBackend(Protocol):
    def search(self, query: str, k: int) -> list[SearchHit]: ...


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    text: str
    url: str | None = None


def load_corpus(path: str | os.PathLike) -> list[Document]:
    """Read a JSONL corpus of ``{id, title, text}`` rows (``url`` optional)."""
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                docs.append(Document(str(row["id"]), row.get("title", ""), row.get("text", ""), row.get("url")))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ToolError(f"{path}:{lineno}: bad corpus row ({exc})") from exc
    return docs


class FixtureSearch:
    """Local tf-idf search with no document-length normalization.

    ``score(d) = sum over query terms of tf(term, d) * idf(term)`` with
    ``idf = ln(1 + (N - df + 0.5) / (df + 0.5))``. Ties go to the smaller
    document id. ``delay`` simulates a slow service in tests.
    """

    def __init__(self, documents: Sequence[Document], delay: float = 0.0):
        self.documents = list(documents)
        self.delay = delay
        self._tf = [Counter(normalized_tokens(f"{d.title} {d.text}")) for d in self.documents]
        df: Counter[str] = Counter()
        for tf in self._tf:
            df.update(tf.keys())
        n = len(self.documents)
        self._idf = {term: math.log(1 + (n - c + 0.5) / (c + 0.5)) for term, c in df.items()}

    @classmethod
    def from_file(cls, path: str | os.PathLike, **kwargs) -> "FixtureSearch":
        return cls(load_corpus(path), **kwargs)

    def search(self, query: str, k: int) -> list[SearchHit]:
        if self.delay:
            time.sleep(self.delay)
        terms = normalized_tokens(query)
        scored = []
        for doc, tf in zip(self.documents, self._tf):
            score = sum(tf[t] * self._idf.get(t, 0.0) for t in terms)
            if score > 0:
                scored.append((score, doc))
        scored.sort(key=lambda pair: (-pair[0], pair[1].id))
        return [SearchHit(d.title, d.text, d.url, s, d.id) for s, d in scored[:k]]


class HttpSearch:
    """Client for a JSON search service.

    Sends ``POST base_url`` with ``{"query", "k"}`` and accepts either a list
    of hits or ``{"hits": [...]}`` / ``{"results": [...]}``. Each hit needs
    ``title`` and ``text`` (``snippet`` is accepted for ``text``).
    """

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        timeout: float = DEFAULT_TIMEOUT,
        transport: httpx.BaseTransport | None = None,
    ):
        self.base_url = base_url
        self._api_key = api_key
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def search(self, query: str, k: int) -> list[SearchHit]:
        headers = {"Authorization": f"Bearer {self._api_key}"} if self._api_key else {}
        try:
            resp = self._client.post(self.base_url, json={"query": query, "k": k}, headers=headers)
        except httpx.TimeoutException as exc:
            raise ToolTimeout(str(exc)) from exc
        except httpx.HTTPError as exc:
            raise ToolError(str(exc)) from exc
        if resp.status_code != 200:
            raise ToolError(f"search service returned HTTP {resp.status_code}")
        doc = resp.json()
        rows = doc if isinstance(doc, list) else doc.get("hits", doc.get("results", []))
        hits = []
        for row in rows:
            title = row.get("title") or row.get("name") or ""
            text = row.get("text") or row.get("snippet") or ""
            if title or text:
                hits.append(SearchHit(title, text, row.get("url"), float(row.get("score", 0.0))))
        hits.sort(key=lambda h: -h.score)
        return hits[:k]


class SearchTool:
    """A named search tool with argument checks and a per-call timeout."""

    def __init__(self, name: str, backend: SearchBackend, timeout: float = DEFAULT_TIMEOUT, default_k: int = 3):
        self.name = name
        self.backend = backend
        self.timeout = timeout
        self.default_k = default_k

    def search(self, query: str, k: int | None = None) -> list[SearchHit]:
        k = self.default_k if k is None else k
        if k < 1:
            raise ValueError("k must be a positive integer")
        if not query or not query.strip():
            raise EmptyQuery("search query is empty")
        pool = concurrent.futures.ThreadPoolExecutor(max_workers=1)
        try:
            future = pool.submit(self.backend.search, query, k)
            try:
                hits = future.result(timeout=self.timeout)
            except concurrent.futures.TimeoutError as exc:
                raise ToolTimeout(f"{self.name} did not answer within {self.timeout}s") from exc
        finally:
            pool.shutdown(wait=False)
        return hits[:k]


def wiki_search(tool: SearchTool, query: str, k: int = 3) -> list[SearchHit]:
    return tool.search(query, k)


def web_search(tool: SearchTool, query: str, k: int = 3) -> list[SearchHit]:
    return tool.search(query, k)


ToolRegistry = Mapping[str, SearchTool]


def format_observation(hits: Sequence[SearchHit], max_chars: int = 600) -> str:
    if not hits:
        return "Observation: no results"
    rows = []
    for hit in hits:
        text = hit.text if len(hit.text) <= max_chars else hit.text[:max_chars] + "..."
        rows.append(repr({"title": hit.title, "text": text}))
    return "Observation: " + "\n".join(rows)


def execute_tool(call: ToolCall, registry: ToolRegistry) -> tuple[str, list[SearchHit]]:
    """Like :func:`dispatch_tool` but also hands back the hits for citation."""
    tool = registry.get(call.tool)
    if tool is None:
        return f"tool error: unknown tool {call.tool!r}", []
    query = call.args.get("query", "")
    try:
        k = int(call.args["k"]) if "k" in call.args else None
        hits = tool.search(query, k)
    except (ToolError, ValueError) as exc:
        return f"tool error: {exc}", []
    except Exception as exc:  # noqa: BLE001 - observations must never raise
        return f"tool error: {type(exc).__name__}: {exc}", []
    return format_observation(hits), hits


def dispatch_tool(call: ToolCall, registry: ToolRegistry) -> str:
    """Run a tool call and return observation text. Never raises."""
    return execute_tool(call, registry)[0]


def fixture_registry(path: str | os.PathLike, timeout: float = DEFAULT_TIMEOUT) -> dict[str, SearchTool]:
    """Build ``wiki`` and ``web`` tools from local corpora.

    ``path`` is either one JSONL corpus shared by both tools or a directory
    holding ``wiki.jsonl`` and/or ``web.jsonl``.
    """
    path = Path(path)
    if path.is_dir():
        wiki, web = path / "wiki.jsonl", path / "web.jsonl"
        wiki = wiki if wiki.exists() else web
        web = web if web.exists() else wiki
        if not wiki.exists():
            raise ToolError(f"no wiki.jsonl or web.jsonl under {path}")
    else:
        wiki = web = path
    return {
        "wiki": SearchTool("wiki", FixtureSearch.from_file(wiki), timeout),
        "web": SearchTool("web", FixtureSearch.from_file(web), timeout),
    }


def remote_registry(
    wiki_url: str | None = None,
    env: Mapping[str, str] | None = None,
    timeout: float = DEFAULT_TIMEOUT,
) -> dict[str, SearchTool]:
    env = os.environ if env is None else env
    registry: dict[str, SearchTool] = {}
    web_url = env.get(ENV_SEARCH_BASE_URL)
    if web_url:
        registry["web"] = SearchTool("web", HttpSearch(web_url, env.get(ENV_SEARCH_API_KEY), timeout), timeout)
    if wiki_url:
        registry["wiki"] = SearchTool("wiki", HttpSearch(wiki_url, timeout=timeout), timeout)
    if not registry:
        raise ToolError(f"no remote search configured (set {ENV_SEARCH_BASE_URL} or tools.wiki_url)")
    return registry


def parse_tools_option(value: str, wiki_url: str | None = None, timeout: float = DEFAULT_TIMEOUT) -> dict[str, SearchTool]:
    """Interpret ``--tools remote|fixture:<path>``."""
    if value == "remote":
        return remote_registry(wiki_url, timeout=timeout)
    if value.startswith("fixture:"):
        return fixture_registry(value[len("fixture:"):], timeout)
    raise ValueError(f"--tools expects 'remote' or 'fixture:<path>', got {value!r}")

