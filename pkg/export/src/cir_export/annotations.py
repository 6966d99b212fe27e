"""Convert published CIR annotation layouts into the toolkit's jsonl schemas.

FashionIQ ships caption files `captions/cap.{split}.{phase}.json`, each a
JSON array of {"target", "candidate", "captions": [str, str]}. CIRR ships
`captions/cap.rc2.{phase}.json` with {"pairid", "reference", "target_hard",
"caption", "img_set": {"id", "members"}}. Schema drift in either layout is
reported field by field rather than swallowed.
"""

from __future__ import annotations

import json
from pathlib import Path

FASHIONIQ_SPLITS = ("dress", "shirt", "toptee")


class AnnotationError(ValueError):
    pass


def _load_json_array(path) -> list:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise AnnotationError(f"annotation file missing: {path}")
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: not valid JSON ({exc})")
    if not isinstance(data, list):
        raise AnnotationError(f"{path}: expected a JSON array")
    return data


def _require_fields(record: dict, fields, path, index: int) -> None:
    missing = [f for f in fields if f not in record]
    if missing:
        raise AnnotationError(
            f"{path}[{index}]: missing fields {missing} "
            f"(have {sorted(record)})"
        )


def _write_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def import_fashioniq(root, phase: str, out_path, caption_mode: str = "concat",
                     separator: str = " and ", splits=FASHIONIQ_SPLITS) -> int:
    """FashionIQ caption files -> annotated triplets jsonl. Returns count."""
    if caption_mode not in ("concat", "separate"):
        raise AnnotationError(f"unknown caption mode {caption_mode!r}")
    triplets = []
    for split in splits:
        path = Path(root) / "captions" / f"cap.{split}.{phase}.json"
        for i, rec in enumerate(_load_json_array(path)):
            _require_fields(rec, ("target", "candidate", "captions"), path, i)
            captions = [c.strip() for c in rec["captions"] if c and c.strip()]
            if not captions:
                raise AnnotationError(f"{path}[{i}]: no usable captions")
            if caption_mode == "concat":
                texts = [separator.join(captions)]
            else:
                texts = captions
            for text in texts:
                triplets.append({
                    "ref_id": rec["candidate"],
                    "modified_text": text,
                    "target_id": rec["target"],
                    "provenance": "annotated",
                    "template_id": None,
                })
    _write_jsonl(triplets, out_path)
    return len(triplets)


def import_cirr(root, phase: str, out_path, groups_path) -> tuple[int, int]:
    """CIRR caption file -> triplets jsonl + semantic groups jsonl."""
    path = Path(root) / "captions" / f"cap.rc2.{phase}.json"
    triplets = []
    groups: dict[str, list[str]] = {}
    for i, rec in enumerate(_load_json_array(path)):
        _require_fields(rec, ("reference", "target_hard", "caption", "img_set"),
                        path, i)
        img_set = rec["img_set"]
        if not isinstance(img_set, dict) or "id" not in img_set \
                or "members" not in img_set:
            raise AnnotationError(
                f"{path}[{i}]: img_set must carry 'id' and 'members'")
        triplets.append({
            "ref_id": rec["reference"],
            "modified_text": rec["caption"],
            "target_id": rec["target_hard"],
            "provenance": "annotated",
            "template_id": None,
        })
        gid = str(img_set["id"])
        members = [str(m) for m in img_set["members"]]
        if gid in groups and groups[gid] != members:
            raise AnnotationError(
                f"{path}[{i}]: group {gid!r} redefined with different members")
        groups[gid] = members
    _write_jsonl(triplets, out_path)
    _write_jsonl(
        [{"group_id": g, "members": groups[g]} for g in sorted(groups)],
        groups_path,
    )
    return len(triplets), len(groups)
