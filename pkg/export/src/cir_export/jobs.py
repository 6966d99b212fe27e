"""Batch export jobs: images or texts in, one CIRE file out.

Row order always matches the input list order. Unreadable images are
skipped with a warning list; the job fails outright when more than 1% of
inputs were skipped. Every emitted CIRE file gets a sidecar manifest
recording the encoder name + version and the row inventory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cire import write_cire
from .encoders import EncoderError, pin_encoder_version

SKIP_FAIL_FRACTION = 0.01


class ExportError(ValueError):
    pass


@dataclass
class ExportJob:
    inputs: list           # [(item_id, source)] pairs in output order
    encoder: object
    out_path: str
    batch_size: int = 64
    device: str = "cpu"
    skipped: list = field(default_factory=list)


def _write_sidecar(job: ExportJob, n: int, dim: int, kind: str) -> None:
    sidecar = {
        "kind": kind,
        "encoder": job.encoder.name,
        "encoder_version": job.encoder.version,
        "device": job.device,
        "n": n,
        "dim": dim,
        "skipped": job.skipped,
    }
    with open(str(job.out_path) + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def export_image_embeddings(job: ExportJob, lock_path=None) -> str:
    """Encode every readable image; id = filename stem unless given."""
    if not job.inputs:
        raise ExportError("no images to export")
    if lock_path is None:
        lock_path = Path(job.out_path).parent / "encoders.lock.json"
    pin_encoder_version(lock_path, job.encoder)
    ids, rows = [], []
    for item_id, source in job.inputs:
        try:
            rows.append(job.encoder.encode_image(source))
        except EncoderError as exc:
            job.skipped.append({"image_id": item_id, "reason": str(exc)})
            continue
        ids.append(item_id)
    if len(job.skipped) > SKIP_FAIL_FRACTION * len(job.inputs):
        raise ExportError(
            f"{len(job.skipped)} of {len(job.inputs)} images unreadable "
            f"(> {SKIP_FAIL_FRACTION:.0%}): "
            + "; ".join(s["image_id"] for s in job.skipped[:5])
        )
    data = np.stack(rows).astype(np.float32)
    write_cire(ids, data, job.out_path)
    _write_sidecar(job, len(ids), data.shape[1], "image")
    return str(job.out_path)


def export_text_embeddings(job: ExportJob, lock_path=None) -> str:
    """Encode texts; ids are the texts themselves (deduplicated)."""
    if not job.inputs:
        raise ExportError("no texts to export")
    if lock_path is None:
        lock_path = Path(job.out_path).parent / "encoders.lock.json"
    pin_encoder_version(lock_path, job.encoder)
    ids, rows = [], []
    seen = set()
    for item_id, text in job.inputs:
        if item_id in seen:
            continue
        seen.add(item_id)
        rows.append(job.encoder.encode_text(text))
        ids.append(item_id)
    data = np.stack(rows).astype(np.float32)
    write_cire(ids, data, job.out_path)
    _write_sidecar(job, len(ids), data.shape[1], "text")
    return str(job.out_path)


def image_list_from_dir(root) -> list[tuple[str, str]]:
    """All image files under root, sorted by stem; id = filename stem."""
    exts = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}
    paths = sorted(
        (p for p in Path(root).iterdir() if p.suffix.lower() in exts),
        key=lambda p: p.stem,
    )
    if not paths:
        raise ExportError(f"no image files under {root}")
    stems = [p.stem for p in paths]
    if len(set(stems)) != len(stems):
        raise ExportError(f"duplicate filename stems under {root}")
    return [(p.stem, str(p)) for p in paths]
