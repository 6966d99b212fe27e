"""Exhaustive retrieval evaluation: Recall@K, subset recall, Rmean.

Ranking is a full sort of cosine scores against the encoded candidate
corpus with ties broken by ascending id, so two runs over the same inputs
produce identical reports on any platform. The reference image can be
masked from its own candidate list (the CIRR protocol); FashionIQ ranks
the full gallery.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError
from .model import Checkpoint, encode_query_batch, encode_target_batch
from .store import EmbeddingMatrix, rank_rows

CONVENTIONS = ("fashioniq", "cirr")


@dataclass(frozen=True)
class EvalQuery:
    ref_id: str
    text_id: str
    target_id: str
    group_id: str | None = None


@dataclass
class EvalReport:
    recall_at: dict[int, float]
    subset_recall_at: dict[int, float]
    rmean: float | None  # None when the convention's components were not requested
    convention: str
    n_queries: int
    masked_reference: bool
    per_group: dict[str, dict[int, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "subset_recall_at": {str(k): v for k, v in sorted(self.subset_recall_at.items())},
            "rmean": self.rmean,
            "convention": self.convention,
            "n_queries": self.n_queries,
            "masked_reference": self.masked_reference,
            "per_group": {
                g: {str(k): v for k, v in sorted(m.items())}
                for g, m in sorted(self.per_group.items())
            },
        }


def read_queries(path) -> list[EvalQuery]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(EvalQuery(
                    ref_id=rec["ref_id"],
                    text_id=rec["text_id"],
                    target_id=rec["target_id"],
                    group_id=rec.get("group_id"),
                ))
            except (KeyError, json.JSONDecodeError) as exc:
                raise DataFormatError(f"{path}:{lineno}: bad query record ({exc})")
    return out


def write_queries(queries, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(json.dumps({
                "ref_id": q.ref_id, "text_id": q.text_id,
                "target_id": q.target_id, "group_id": q.group_id,
            }, sort_keys=True) + "\n")


def read_groups(path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[rec["group_id"]] = list(rec["members"])
            except (KeyError, json.JSONDecodeError) as exc:
                raise DataFormatError(f"{path}:{lineno}: bad group record ({exc})")
    return out


def write_groups(groups: dict[str, list[str]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for gid in sorted(groups):
            fh.write(json.dumps(
                {"group_id": gid, "members": groups[gid]}, sort_keys=True) + "\n")


# --- metric primitives -------------------------------------------------------

def recall_at_k(ranked_lists, targets, ks) -> dict[int, float]:
    """Fraction of queries whose target appears in the first K ranked ids."""
    ks = sorted(set(int(k) for k in ks))
    if not ranked_lists:
        raise DataFormatError("no ranked lists given")
    if len(ranked_lists) != len(targets):
        raise DataFormatError(
            f"{len(ranked_lists)} ranked lists for {len(targets)} targets"
        )
    shortest = min(len(r) for r in ranked_lists)
    if ks and ks[-1] > shortest:
        raise ConfigError(
            f"K={ks[-1]} exceeds ranked-list length {shortest}"
        )
    hits = {k: 0 for k in ks}
    for ranked, target in zip(ranked_lists, targets):
        try:
            pos = list(ranked).index(target)
        except ValueError:
            pos = None
        for k in ks:
            if pos is not None and pos < k:
                hits[k] += 1
    n = len(ranked_lists)
    return {k: hits[k] / n for k in ks}


def rmean(metrics: dict, convention: str) -> float:
    """Summary metric: mean of all R@K (fashioniq) or (R@5 + Rsub@1)/2 (cirr)."""
    if convention == "fashioniq":
        recalls = metrics.get("recall_at") or {}
        if not recalls:
            raise ConfigError("fashioniq rmean needs at least one R@K value")
        return float(np.mean(list(recalls.values())))
    if convention == "cirr":
        recalls = metrics.get("recall_at") or {}
        subset = metrics.get("subset_recall_at") or {}
        if 5 not in recalls or 1 not in subset:
            raise ConfigError("cirr rmean needs R@5 and R_subset@1")
        return (recalls[5] + subset[1]) / 2.0
    raise ConfigError(f"unknown convention {convention!r}")


# --- full evaluation ---------------------------------------------------------

def _encode_queries(ckpt: Checkpoint, queries, images: EmbeddingMatrix,
                    texts: EmbeddingMatrix) -> np.ndarray:
    R = images.rows([q.ref_id for q in queries])
    M = texts.rows([q.text_id for q in queries])
    return encode_query_batch(ckpt.params, R, M).Q


def rank_full(ckpt: Checkpoint, queries, images: EmbeddingMatrix,
              texts: EmbeddingMatrix, mask_reference: bool,
              chunk: int = 256) -> list[list[str]]:
    """Exhaustively rank the whole candidate corpus for every query."""
    cand = encode_target_batch(ckpt.params, images.data).Out
    ids = images.ids
    ranked: list[list[str]] = []
    for lo in range(0, len(queries), chunk):
        block = queries[lo:lo + chunk]
        Q = _encode_queries(ckpt, block, images, texts)
        scores = Q.astype(np.float64) @ cand.astype(np.float64).T
        if mask_reference:
            for i, q in enumerate(block):
                scores[i, images.index_of(q.ref_id)] = -np.inf
        order = rank_rows(scores, ids)
        for i, q in enumerate(block):
            row = [ids[j] for j in order[i]]
            if mask_reference:
                row = [c for c in row if c != q.ref_id]
            ranked.append(row)
    return ranked


def subset_recall_at_k(ckpt: Checkpoint, queries, images: EmbeddingMatrix,
                       texts: EmbeddingMatrix, groups: dict[str, list[str]],
                       ks) -> dict[int, float]:
    """Recall@K with ranking restricted to each query's semantic group.

    The reference is always masked inside the group; the group must contain
    the target and at least max(K) members besides the reference.
    """
    ks = sorted(set(int(k) for k in ks))
    cand = encode_target_batch(ckpt.params, images.data).Out
    Q = _encode_queries(ckpt, queries, images, texts)
    ranked_lists = []
    for i, q in enumerate(queries):
        if q.group_id is None or q.group_id not in groups:
            raise DataFormatError(f"query for {q.ref_id!r} has no resolvable group")
        members = [m for m in groups[q.group_id] if m != q.ref_id]
        if q.target_id not in members:
            raise DataFormatError(
                f"target {q.target_id!r} outside its group {q.group_id!r}"
            )
        if ks and len(members) < ks[-1]:
            raise DataFormatError(
                f"group {q.group_id!r} has {len(members)} members excluding the "
                f"reference, fewer than K={ks[-1]}"
            )
        rows = [images.index_of(m) for m in members]
        scores = Q[i].astype(np.float64) @ cand[rows].astype(np.float64).T
        order = rank_rows(scores[None, :], [images.ids[r] for r in rows])[0]
        ranked_lists.append([members[j] for j in order])
    return recall_at_k(ranked_lists, [q.target_id for q in queries], ks)


def evaluate(
    ckpt: Checkpoint,
    queries,
    images: EmbeddingMatrix,
    texts: EmbeddingMatrix,
    ks,
    convention: str = "cirr",
    subset_ks=None,
    groups: dict[str, list[str]] | None = None,
    mask_reference: bool | None = None,
) -> EvalReport:
    """Full evaluation pass: a pure function of checkpoint, queries, corpus."""
    if convention not in CONVENTIONS:
        raise ConfigError(f"unknown convention {convention!r}")
    if not queries:
        raise DataFormatError("empty query set")
    if not images.normalized or not texts.normalized:
        raise ConfigError("eval stores must be normalized")
    if mask_reference is None:
        mask_reference = convention == "cirr"
    for q in queries:
        if q.target_id not in images:
            raise DataFormatError(f"target {q.target_id!r} missing from corpus")
    ranked = rank_full(ckpt, queries, images, texts, mask_reference)
    recalls = recall_at_k(ranked, [q.target_id for q in queries], ks)
    subset = {}
    if subset_ks:
        if groups is None:
            raise ConfigError("subset metrics require a groups file")
        subset = subset_recall_at_k(ckpt, queries, images, texts, groups, subset_ks)
    try:
        summary = rmean({"recall_at": recalls, "subset_recall_at": subset}, convention)
    except ConfigError:
        summary = None
    report = EvalReport(
        recall_at=recalls,
        subset_recall_at=subset,
        rmean=summary,
        convention=convention,
        n_queries=len(queries),
        masked_reference=mask_reference,
    )
    if convention == "fashioniq" and all(q.group_id is not None for q in queries):
        by_group: dict[str, list[int]] = {}
        for i, q in enumerate(queries):
            by_group.setdefault(q.group_id, []).append(i)
        for gid, idxs in sorted(by_group.items()):
            report.per_group[gid] = recall_at_k(
                [ranked[i] for i in idxs],
                [queries[i].target_id for i in idxs],
                ks,
            )
    return report
