"""Per-category language prompts: filled templates plus cached LLM descriptions."""

import json
import os
import threading
from dataclasses import dataclass
from pathlib import Path

PLACEHOLDER = "{}"

# general-purpose templates (the {number} template needs a second slot and is left out)
DEFAULT_TEMPLATES = (
    "A photo of a {}.",
    "A bad photo of a {}.",
    "A photo of many {}.",
    "A low resolution photo of the {}.",
    "A photo of a hard to see {}.",
    "A cropped photo of a {}.",
    "A blurry photo of a {}.",
    "A good photo of a {}.",
)

LLM_QUERIES = (
    "Describe what a {} looks like?",
    "How can you identify a {}?",
    "Describe what a {} in a distance look like within 20 words.",
    "Describe what a {} in a low resolution photo look like within 20 words.",
)

CATEGORY_FREE = "the category of the most numerous objects in the image"

PROMPT_CACHE_ENV = "URM_PROMPT_CACHE"


class PromptError(ValueError):
    pass


class MissingPromptError(PromptError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("no cached LLM response for: " + "; ".join(f"({c!r}, {q!r})" for c, q in self.missing))


@dataclass(frozen=True)
class PromptSet:
    category: str
    prompts: tuple

    def __post_init__(self):
        if not self.prompts:
            raise PromptError(f"empty prompt set for {self.category!r}")
        for p in self.prompts:
            if PLACEHOLDER in p:
                raise PromptError(f"unfilled placeholder in prompt {p!r}")


def _check_template(t):
    if t.count(PLACEHOLDER) != 1:
        raise PromptError(f"template must contain exactly one '{{}}': {t!r}")


def fill_templates(category, templates):
    if isinstance(templates, str):
        templates = [templates]
    for t in templates:
        _check_template(t)
    return [t.replace(PLACEHOLDER, category) for t in templates]


def query_text(category, query, category_free=False):
    """The question actually sent to the language model."""
    _check_template(query)
    if category_free:
        # "Describe what a {} looks like?" -> "Describe what the category of ... looks like?"
        for article in ("a(n) {}", "an {}", "a {}"):
            if article in query:
                return query.replace(article, CATEGORY_FREE)
        return query.replace(PLACEHOLDER, CATEGORY_FREE)
    return query.replace(PLACEHOLDER, category)


class PromptCache:
    """JSON file mapping category -> query -> response.  Writes go through one lock."""

    def __init__(self, path=None):
        path = path or os.environ.get(PROMPT_CACHE_ENV)
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self.data = {}
        if self.path is not None and self.path.exists():
            self.data = json.loads(self.path.read_text())

    def get(self, category, query):
        return self.data.get(category, {}).get(query)

    def put(self, category, query, response):
        with self._lock:
            self.data.setdefault(category, {})[query] = response
            if self.path is not None:
                tmp = self.path.with_suffix(self.path.suffix + ".tmp")
                tmp.write_text(json.dumps(self.data, indent=1, sort_keys=True, ensure_ascii=False))
                tmp.replace(self.path)


class LLMClient:
    def complete(self, text):
        raise NotImplementedError


class OfflineClient(LLMClient):
    """Never answers; every lookup must come from the cache."""

    def complete(self, text):
        raise ConnectionError("offline mode: no language model configured")


class HTTPClient(LLMClient):
    """Chat-completions style HTTP endpoint.  Not exercised by the test-suite."""

    def __init__(self, url, model, api_key=None, timeout=30.0):
        self.url, self.model, self.api_key, self.timeout = url, model, api_key, timeout

    def complete(self, text):
        import httpx

        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        body = {"model": self.model, "messages": [{"role": "user", "content": text}]}
        r = httpx.post(self.url, json=body, headers=headers, timeout=self.timeout)
        r.raise_for_status()
        return r.json()["choices"][0]["message"]["content"].strip()


def llm_prompts(category, llm_queries, client=None, cache=None, category_free=False):
    """One response per query.  Live results are written back to the cache;
    a failing client falls back to the cache, and anything still missing is an error."""
    cache = cache if cache is not None else PromptCache()
    client = client or OfflineClient()
    key = CATEGORY_FREE if category_free else category
    out, missing = [], []
    for q in llm_queries:
        text = query_text(category, q, category_free)
        resp = cache.get(key, text)
        if resp is None:
            try:
                resp = client.complete(text)
                cache.put(key, text, resp)
            except Exception:
                resp = None
        if resp is None:
            missing.append((key, text))
        else:
            out.append(resp)
    if missing:
        raise MissingPromptError(missing)
    return out


def build_prompt_set(category, templates=DEFAULT_TEMPLATES, llm_queries=LLM_QUERIES, client=None, cache=None):
    prompts = fill_templates(category, templates)
    if llm_queries:
        prompts += llm_prompts(category, llm_queries, client, cache)
    return PromptSet(category, tuple(prompts))


class TemplateClient(LLMClient):
    """Deterministic stand-in that answers descriptive queries from a
    category's shape/colour attributes; used to populate synthetic caches."""

    def __init__(self, descriptions):
        self.descriptions = descriptions

    def complete(self, text):
        for name, desc in self.descriptions.items():
            if name in text:
                return desc
        raise KeyError(text)
