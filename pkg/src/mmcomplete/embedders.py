"""Prompt construction and the frozen global image/text embedders.

Two backends are provided. :class:`StubEmbedder` maps inputs to unit 512-d
vectors by content hashing, so results are identical across processes.
:class:`ExternalEmbedder` talks to an out-of-process dual encoder over HTTP.
Neither exposes a gradient path: embeddings come back as plain arrays.
"""

from __future__ import annotations

import base64
import hashlib
import logging
import re
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

log = logging.getLogger(__name__)

EMBED_DIM = 512
MAX_PROMPT_TOKENS = 77
IMAGE_SHAPE = (3, 224, 224)
NUM_VIEWS = 24

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class BackendError(RuntimeError):
    """An embedder or text backend failed after retries."""

    def __init__(self, message, attempts=0, retry_after=None, last_error=None):
        super().__init__(message)
        self.attempts = attempts
        self.retry_after = retry_after
        self.last_error = last_error


@dataclass(frozen=True)
class RenderedImage:
    """Channel-major 3x224x224 image with values in [0, 1]."""

    pixels: np.ndarray
    view_id: int = 0

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.shape != IMAGE_SHAPE:
            raise ValueError(f"image must have shape {IMAGE_SHAPE}, got {px.shape}")
        if not np.isfinite(px).all():
            raise ValueError("image has non-finite pixels")
        if not 0 <= self.view_id < NUM_VIEWS:
            raise ValueError(f"view_id must be in [0, {NUM_VIEWS}), got {self.view_id}")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)


@dataclass(frozen=True)
class GlobalFeature:
    values: np.ndarray
    source: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32).reshape(-1)
        if v.shape != (EMBED_DIM,) or not np.isfinite(v).all():
            raise ValueError(f"global feature must be {EMBED_DIM} finite values")
        if self.source not in ("vision", "text"):
            raise ValueError(f"unknown source {self.source!r}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class TextPrompt:
    category: str
    rich_description: Optional[str]
    rendered: str
    token_count: int


def tokenize(text: str) -> list[str]:
    """Whitespace-and-punctuation tokenizer used by the stub path."""
    return _TOKEN_RE.findall(text)


def _cut_after_tokens(text: str, n: int) -> str:
    spans = [m.end() for m in _TOKEN_RE.finditer(text)]
    if n >= len(spans):
        return text
    return text[: spans[n - 1]] if n > 0 else ""


def build_prompt(
    category: str,
    rich_description: Optional[str] = None,
    max_tokens: int = MAX_PROMPT_TOKENS,
    count_tokens: Callable[[str], int] | None = None,
) -> TextPrompt:
    """Render ``This is a {category}`` plus an optional rich description.

    Only the description is ever truncated; a category whose template alone
    exceeds ``max_tokens`` is rejected.
    """
    if not category or not category.strip():
        raise ValueError("category must be non-empty")
    count = count_tokens or (lambda s: len(tokenize(s)))
    template = f"This is a {category}"
    used = count(template)
    if used > max_tokens:
        raise ValueError(f"prompt template alone is {used} tokens (> {max_tokens})")
    desc = (rich_description or "").strip()
    if not desc:
        return TextPrompt(category, None, template, used)

    rendered = f"{template}. {desc}"
    if count_tokens is None:
        rendered = template + _cut_after_tokens(rendered[len(template):], max_tokens - used)
    else:
        # external tokenizers are opaque; drop trailing words until it fits
        words = desc.split()
        while count(rendered) > max_tokens and words:
            words.pop()
            rendered = f"{template}. {' '.join(words)}" if words else template
    return TextPrompt(category, rich_description, rendered.rstrip(), count(rendered.rstrip()))


class EmbedderBackend:
    """Frozen dual encoder: images and prompts to 512-d global features."""

    name = "base"

    def embed_image(self, image: RenderedImage) -> GlobalFeature:
        raise NotImplementedError

    def embed_text(self, prompt: TextPrompt) -> GlobalFeature:
        raise NotImplementedError

    def count_tokens(self, text: str) -> int:
        return len(tokenize(text))


def _hash_vector(kind: str, payload: bytes, seed: int) -> np.ndarray:
    digest = hashlib.sha256(kind.encode() + b"\0" + str(seed).encode() + b"\0" + payload).digest()
    rng = np.random.default_rng(np.frombuffer(digest, dtype="<u8"))
    v = rng.standard_normal(EMBED_DIM)
    return (v / np.linalg.norm(v)).astype(np.float32)


class StubEmbedder(EmbedderBackend):
    """Deterministic content-hash embedder standing in for a pretrained model."""

    name = "stub"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def embed_image(self, image: RenderedImage) -> GlobalFeature:
        payload = np.ascontiguousarray(image.pixels, dtype="<f4").tobytes()
        return GlobalFeature(_hash_vector("image", payload, self.seed), "vision")

    def embed_text(self, prompt: TextPrompt) -> GlobalFeature:
        if prompt.token_count > MAX_PROMPT_TOKENS:
            raise ValueError(f"prompt has {prompt.token_count} tokens (> {MAX_PROMPT_TOKENS})")
        return GlobalFeature(_hash_vector("text", prompt.rendered.encode(), self.seed), "text")


class ExternalEmbedder(EmbedderBackend):
    """HTTP client for an out-of-process dual encoder.

    The service answers ``POST /embed`` with ``{"embedding": [...512]}`` for
    ``{"kind": "text", "text": ...}`` or ``{"kind": "image", "shape": [...],
    "pixels_b64": ...}`` (little-endian float32), and ``POST /tokenize`` with
    ``{"token_count": n}``.
    """

    name = "external"

    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 3,
                 backoff: float = 0.5, client=None):
        import httpx

        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._client = client or httpx.Client(timeout=timeout)

    def _post(self, route: str, body: dict) -> dict:
        import httpx

        last = None
        for attempt in range(1, self.retries + 1):
            try:
                resp = self._client.post(f"{self.endpoint}{route}", json=body, timeout=self.timeout)
                resp.raise_for_status()
                return resp.json()
            except (httpx.HTTPError, ValueError) as exc:
                last = exc
                log.warning("embedder request %s failed (attempt %d/%d): %s", route, attempt, self.retries, exc)
                if attempt < self.retries:
                    time.sleep(self.backoff * 2 ** (attempt - 1))
        raise BackendError(
            f"embedder {self.endpoint}{route} unavailable",
            attempts=self.retries,
            retry_after=self.backoff * 2**self.retries,
            last_error=last,
        )

    def count_tokens(self, text: str) -> int:
        return int(self._post("/tokenize", {"text": text})["token_count"])

    def embed_image(self, image: RenderedImage) -> GlobalFeature:
        payload = base64.b64encode(np.ascontiguousarray(image.pixels, dtype="<f4").tobytes()).decode()
        out = self._post("/embed", {"kind": "image", "shape": list(IMAGE_SHAPE), "pixels_b64": payload})
        return GlobalFeature(np.asarray(out["embedding"]), "vision")

    def embed_text(self, prompt: TextPrompt) -> GlobalFeature:
        if prompt.token_count > MAX_PROMPT_TOKENS:
            raise ValueError(f"prompt has {prompt.token_count} tokens (> {MAX_PROMPT_TOKENS})")
        out = self._post("/embed", {"kind": "text", "text": prompt.rendered})
        return GlobalFeature(np.asarray(out["embedding"]), "text")


def embed_image_global(image: RenderedImage, backend: EmbedderBackend) -> GlobalFeature:
    return backend.embed_image(image)


def embed_text_global(prompt: TextPrompt, backend: EmbedderBackend) -> GlobalFeature:
    return backend.embed_text(prompt)


def make_embedder(backend: str = "stub", endpoint: str = "", seed: int = 0) -> EmbedderBackend:
    if backend == "stub":
        return StubEmbedder(seed)
    if backend == "external":
        if not endpoint:
            raise ValueError("embedder.endpoint is required for the external backend")
        return ExternalEmbedder(endpoint)
    raise ValueError(f"unknown embedder backend {backend!r}")
