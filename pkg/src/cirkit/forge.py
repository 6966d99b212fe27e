"""Generate training triplets from an image collection.

Pipeline pieces: match every image to one target drawn from a similarity
rank window, render modified texts from caption pairs with fixed templates,
and assemble generated triplets that share a schema with annotated data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError
from .store import EmbeddingMatrix, cosine_scores, rank_rows

# Rendered by concatenation, not str.format, so captions may contain braces.
_TEMPLATE_RENDERERS = {
    0: lambda ref, target: target + " instead of " + ref,
    1: lambda ref, target: "Unlike " + ref + ", I want " + target,
    2: lambda ref, target: target,
}
TEMPLATE_IDS = (0, 1, 2)


@dataclass(frozen=True)
class PairMatchConfig:
    """Similarity rank window [c0, c1) and sampling seed.

    Rank 0 is the most similar other image (self excluded). The effective
    window is clamped to [c0, min(c1, N-1)); fractional=True interprets
    c0/c1 as fractions of the per-reference candidate count instead.
    """

    c0: float
    c1: float
    seed: int = 0
    fractional: bool = False

    def __post_init__(self):
        if self.c0 < 0:
            raise ConfigError(f"c0 must be >= 0, got {self.c0}")
        if self.c1 <= self.c0:
            raise ConfigError(f"need c0 < c1, got [{self.c0}, {self.c1})")
        if self.fractional and self.c1 > 1:
            raise ConfigError("fractional window bounds must lie in [0, 1]")

    def resolve(self, n_images: int) -> tuple[int, int]:
        """Clamp to the candidate count (N-1 ranked images per reference)."""
        n_candidates = n_images - 1
        if self.fractional:
            lo = int(self.c0 * n_candidates)
            hi = int(self.c1 * n_candidates)
        else:
            lo, hi = int(self.c0), int(self.c1)
        hi = min(hi, n_candidates)
        if lo >= hi:
            raise ConfigError(
                f"rank window [{lo}, {hi}) is empty after clamping to "
                f"{n_candidates} candidates"
            )
        return lo, hi


@dataclass(frozen=True)
class Quadruplet:
    ref_id: str
    ref_caption: str
    target_id: str
    target_caption: str

    def __post_init__(self):
        if self.ref_id == self.target_id:
            raise DataFormatError(f"quadruplet pairs {self.ref_id!r} with itself")


@dataclass(frozen=True)
class Triplet:
    ref_id: str
    modified_text: str
    target_id: str
    provenance: str  # "annotated" | "generated"
    template_id: int | None = None

    def __post_init__(self):
        if self.ref_id == self.target_id:
            raise DataFormatError(f"triplet pairs {self.ref_id!r} with itself")
        if not self.modified_text:
            raise DataFormatError(f"empty modified text for {self.ref_id!r}")
        if self.provenance not in ("annotated", "generated"):
            raise DataFormatError(f"bad provenance {self.provenance!r}")
        if (self.template_id is not None) != (self.provenance == "generated"):
            raise DataFormatError(
                "template_id must be present exactly for generated triplets"
            )


def _row_rng(seed: int, row: int) -> np.random.Generator:
    # Counter-based stream per reference row: schedule-independent sampling.
    return np.random.Generator(
        np.random.Philox(key=np.array([seed, row], dtype=np.uint64))
    )


def match_pairs(
    embeddings: EmbeddingMatrix, cfg: PairMatchConfig, chunk: int = 256
) -> list[tuple[str, str]]:
    """Pair every image with one target sampled from its rank window.

    Every image appears exactly once as a reference; its target is drawn
    uniformly from the images whose descending-similarity rank (self
    excluded) falls inside the clamped window. Deterministic given seed.
    """
    if not embeddings.normalized:
        raise ConfigError("embeddings must be normalized before pair matching")
    n = embeddings.n
    if n < 2:
        raise ConfigError(f"need at least 2 images, got {n}")
    lo, hi = cfg.resolve(n)
    pairs: list[tuple[str, str]] = []
    ids = embeddings.ids
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        block = cosine_scores(embeddings.data[start:stop], embeddings, chunk=chunk)
        scores = block.scores
        # exclude self before ranking
        for i in range(start, stop):
            scores[i - start, i] = -np.inf
        order = rank_rows(scores, ids)
        for i in range(start, stop):
            rank_slot = _row_rng(cfg.seed, i).integers(lo, hi)
            target = ids[order[i - start, rank_slot]]
            pairs.append((ids[i], target))
    return pairs


def render_modified_text(q: Quadruplet, template_id: int) -> str:
    """Render one template over a quadruplet's caption pair. Exact strings."""
    if template_id not in _TEMPLATE_RENDERERS:
        raise ConfigError(f"unknown template id {template_id}")
    if not q.ref_caption or not q.target_caption:
        raise DataFormatError(f"empty caption on pair ({q.ref_id!r}, {q.target_id!r})")
    return _TEMPLATE_RENDERERS[template_id](q.ref_caption, q.target_caption)


def forge_triplets(
    quads: list[Quadruplet],
    templates,
    budget: int,
    seed: int = 0,
) -> list[Triplet]:
    """Emit `budget` x |templates| generated triplets.

    Quadruplets are sampled uniformly without replacement (seeded); each
    selected pair yields one triplet per template. Choosing between a
    pair's multiple renderings happens later, per training step, not here.
    """
    templates = sorted(set(templates))
    if not templates:
        raise ConfigError("template set must be nonempty")
    unknown = [t for t in templates if t not in _TEMPLATE_RENDERERS]
    if unknown:
        raise ConfigError(f"unknown template ids {unknown}")
    if budget < 1:
        raise ConfigError(f"budget must be positive, got {budget}")
    if budget > len(quads):
        raise ConfigError(
            f"budget {budget} exceeds the {len(quads)} available quadruplets"
        )
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    chosen = rng.choice(len(quads), size=budget, replace=False)
    out: list[Triplet] = []
    for idx in chosen:
        q = quads[int(idx)]
        for t in templates:
            out.append(Triplet(
                ref_id=q.ref_id,
                modified_text=render_modified_text(q, t),
                target_id=q.target_id,
                provenance="generated",
                template_id=t,
            ))
    return out


# --- jsonl IO ---------------------------------------------------------------

def write_pairs(pairs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ref_id, target_id in pairs:
            fh.write(json.dumps(
                {"ref_id": ref_id, "target_id": target_id}, sort_keys=True) + "\n")


def read_pairs(path) -> list[tuple[str, str]]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append((rec["ref_id"], rec["target_id"]))
    return out


def write_triplets(triplets, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            fh.write(json.dumps({
                "ref_id": t.ref_id,
                "modified_text": t.modified_text,
                "target_id": t.target_id,
                "provenance": t.provenance,
                "template_id": t.template_id,
            }, sort_keys=True) + "\n")


def read_triplets(path) -> list[Triplet]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(Triplet(
                    ref_id=rec["ref_id"],
                    modified_text=rec["modified_text"],
                    target_id=rec["target_id"],
                    provenance=rec["provenance"],
                    template_id=rec.get("template_id"),
                ))
            except (KeyError, json.JSONDecodeError) as exc:
                raise DataFormatError(f"{path}:{lineno}: bad triplet record ({exc})")
    return out
