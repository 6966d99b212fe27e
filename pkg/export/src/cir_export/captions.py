"""Caption export glue: drive an external captioning endpoint over images.

Speaks the toolkit's provider protocol (POST {url}/caption with
{"image_ref", "prompt"} -> {"caption"}) and writes its captions-file
schema: one {"image_id", "caption", "provider"} record per line, in input
order. Already-captioned ids in an existing output file are skipped, so
interrupted batch runs resume where they left off.
"""

from __future__ import annotations

import json
import time

import requests

CAPTION_PROMPT = "Please briefly describe the {type} in {k} words."


class CaptionExportError(RuntimeError):
    pass


def _post_caption(session, url, image_ref, prompt, retries=3, backoff_s=0.5,
                  timeout_s=30.0):
    last = None
    for attempt in range(retries):
        if attempt:
            time.sleep(backoff_s * 2 ** (attempt - 1))
        try:
            resp = session.post(f"{url.rstrip('/')}/caption",
                                json={"image_ref": image_ref, "prompt": prompt},
                                timeout=timeout_s)
        except requests.RequestException as exc:
            last = f"transport error: {exc}"
            continue
        if resp.status_code != 200:
            last = f"HTTP {resp.status_code}"
            continue
        try:
            return resp.json()["caption"]
        except (ValueError, KeyError):
            last = "malformed response body"
            continue
    raise CaptionExportError(f"caption request for {image_ref!r} failed: {last}")


def export_captions(inputs, url: str, type_word: str, k: int, out_path,
                    session=None) -> int:
    """Caption every (image_id, image_ref) pair; returns new record count."""
    session = session or requests.Session()
    prompt = CAPTION_PROMPT.format(type=type_word, k=k)
    cached = {}
    try:
        with open(out_path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    cached[rec["image_id"]] = rec
    except FileNotFoundError:
        pass
    records = []
    fresh = 0
    for image_id, image_ref in inputs:
        if image_id in cached:
            records.append(cached[image_id])
            continue
        caption = _post_caption(session, url, image_ref, prompt).strip()
        if not caption:
            raise CaptionExportError(f"empty caption for image {image_id!r}")
        records.append({"image_id": image_id, "caption": caption,
                        "provider": "http"})
        fresh += 1
    with open(out_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return fresh
