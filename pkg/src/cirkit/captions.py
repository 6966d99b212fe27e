"""Caption generation through pluggable providers.

Captions are the expensive step of the generation pipeline, so batch runs
cache results to a line-delimited JSON file keyed by image id and skip
cached ids on rerun. Two providers ship here: a deterministic offline stub
(exact word-count captions from a fixed vocabulary, a pure function of
image id + seed) and an HTTP client speaking the POST /caption protocol.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import requests

from .errors import ConfigError, ProviderError

CAPTION_PROMPT = "Please briefly describe the {type} in {k} words."

# Offline stub vocabulary: enough everyday garment / scene words to make
# generated modified texts readable in fixtures.
_STUB_VOCAB = (
    "red blue green black white yellow striped plain floral dotted "
    "short long sleeveless fitted loose bright dark casual formal soft "
    "dress shirt jacket skirt gown top coat scarf collar pattern "
    "cotton silk denim logo belt print vintage modern light heavy"
).split()


def render_caption_prompt(type_word: str, k: int) -> str:
    """Render the captioning prompt for a dataset type word and word budget."""
    if not type_word:
        raise ConfigError("type_word must be nonempty")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    return CAPTION_PROMPT.format(type=type_word, k=k)


@dataclass(frozen=True)
class CaptionRequest:
    image_id: str
    image_ref: str
    prompt: str
    type_word: str
    k: int


@dataclass(frozen=True)
class CaptionRecord:
    image_id: str
    caption: str
    provider: str

    @property
    def token_estimate(self) -> int:
        return max(1, len(self.caption.split()))


def make_requests(image_ids, image_refs, type_word: str, k: int) -> list[CaptionRequest]:
    """Build order-aligned caption requests with the rendered prompt."""
    prompt = render_caption_prompt(type_word, k)
    if image_refs is None:
        image_refs = image_ids
    return [
        CaptionRequest(image_id=i, image_ref=r, prompt=prompt, type_word=type_word, k=k)
        for i, r in zip(image_ids, image_refs)
    ]


class StubProvider:
    """Deterministic captioner: k vocabulary words keyed by (image_id, seed).

    Lets the whole pipeline run and be tested with no model and no network.
    """

    name = "stub"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def caption(self, request: CaptionRequest) -> str:
        material = f"{self.seed}:{request.type_word}:{request.k}:{request.image_id}"
        digest = hashlib.sha256(material.encode("utf-8")).digest()
        words = []
        for i in range(request.k):
            # 2 bytes per word keeps selection uniform enough over the vocab
            j = int.from_bytes(digest[2 * i % 30 : 2 * i % 30 + 2], "little")
            words.append(_STUB_VOCAB[(j + i * 7919) % len(_STUB_VOCAB)])
        return " ".join(words)


class HttpProvider:
    """Client for an external captioning service.

    Protocol: POST {url}/caption with {"image_ref", "prompt"}, expect
    200 and {"caption": str}. Any non-200 counts as a transport failure;
    failures are retried with exponential backoff before surfacing.
    """

    name = "http"

    def __init__(self, base_url: str, retries: int = 3, backoff_s: float = 0.5,
                 timeout_s: float = 30.0, session=None):
        self.base_url = base_url.rstrip("/")
        self.retries = retries
        self.backoff_s = backoff_s
        self.timeout_s = timeout_s
        self.session = session or requests.Session()

    def caption(self, request: CaptionRequest) -> str:
        payload = {"image_ref": request.image_ref, "prompt": request.prompt}
        last_err = None
        for attempt in range(self.retries):
            if attempt:
                time.sleep(self.backoff_s * 2 ** (attempt - 1))
            try:
                resp = self.session.post(
                    f"{self.base_url}/caption", json=payload, timeout=self.timeout_s
                )
            except requests.RequestException as exc:
                last_err = f"transport error: {exc}"
                continue
            if resp.status_code != 200:
                last_err = f"HTTP {resp.status_code}"
                continue
            try:
                return resp.json()["caption"]
            except (ValueError, KeyError):
                last_err = "malformed response body"
                continue
        raise ProviderError(
            f"caption request for {request.image_id!r} failed after "
            f"{self.retries} attempts ({last_err})"
        )


class CaptionCache:
    """Append-only jsonl cache of caption records, keyed by image id."""

    def __init__(self, path):
        self.path = path
        self._lock = threading.Lock()
        self._records: dict[str, CaptionRecord] = {}
        try:
            with open(path, "r", encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    rec = json.loads(line)
                    self._records[rec["image_id"]] = CaptionRecord(
                        image_id=rec["image_id"],
                        caption=rec["caption"],
                        provider=rec.get("provider", "unknown"),
                    )
        except FileNotFoundError:
            pass

    def get(self, image_id: str) -> CaptionRecord | None:
        return self._records.get(image_id)

    def put(self, record: CaptionRecord) -> None:
        with self._lock:
            self._records[record.image_id] = record
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({
                    "image_id": record.image_id,
                    "caption": record.caption,
                    "provider": record.provider,
                }, sort_keys=True) + "\n")

    def __len__(self) -> int:
        return len(self._records)


def caption_batch(
    requests_in: list[CaptionRequest],
    provider,
    cache: CaptionCache | None = None,
    fanout: int = 1,
) -> list[CaptionRecord]:
    """Caption every request, order-aligned with the input.

    Cached ids are served without a provider call. Provider calls may run
    with bounded parallelism; output order is input order regardless of
    completion order. Empty captions are contract violations, not records.
    """
    if fanout < 1:
        raise ConfigError(f"fanout must be >= 1, got {fanout}")

    def fetch(req: CaptionRequest) -> CaptionRecord:
        if cache is not None:
            hit = cache.get(req.image_id)
            if hit is not None:
                return hit
        text = provider.caption(req).strip()
        if not text:
            raise ProviderError(f"empty caption for image {req.image_id!r}")
        rec = CaptionRecord(image_id=req.image_id, caption=text, provider=provider.name)
        if cache is not None:
            cache.put(rec)
        return rec

    if fanout == 1:
        return [fetch(r) for r in requests_in]
    with ThreadPoolExecutor(max_workers=fanout) as pool:
        return list(pool.map(fetch, requests_in))
