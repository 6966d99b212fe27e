"""Separable synthetic dataset for desk-scale training studies.

Each triplet is built from latent unit vectors: a reference z_r, an edit
z_m, and a target normalize(z_r + z_m + noise * g). References come from a
modest number of clusters and edits from a small shared vocabulary; a
fraction of triplets use an edit aligned with the reference itself (so the
target stays close to the reference and the text is nearly redundant); and
a fraction are siblings that point at an already-used popular target from
a fresh reference, with the edit solved so the target formula still holds
exactly. Together these reproduce the failure modes that separate the
negative-construction methods on real data: replacing the modified text on
a redundant-text triplet yields false negatives, replacing the reference
can hit a near-duplicate reference, replacing the whole query pair can
sample a query that legitimately points at the very same popular target,
and nearby targets demand genuinely sharp ranking.

Observed image embeddings are the latents themselves; observed text
embeddings are the edit latents passed through a fixed seeded rotation
plus per-text encoder noise, mimicking the modality gap and imperfection
of real text encoders. Without the gap the identity-initialized model is
already optimal and training studies have nothing to show; without the
text noise every query is a perfect stand-in for its target and the
negative-construction methods collapse into one another.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .evaluator import EvalQuery, write_groups, write_queries
from .forge import Triplet, write_triplets
from .store import make_matrix, write_embeddings


@dataclass(frozen=True)
class SyntheticSpec:
    n_images: int = 2000
    dim: int = 32
    noise: float = 0.1
    n_clusters: int = 4
    cluster_spread: float = 0.3
    text_vocab: int = 4
    identity_edit_fraction: float = 0.3
    shared_target_fraction: float = 0.3
    text_noise: float = 0.35
    val_fraction: float = 0.3
    group_size: int = 6
    seed: int = 0
    modality_rotation: bool = True

    def __post_init__(self):
        if self.n_images < 4:
            raise ConfigError("n_images must be >= 4")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must be in (0, 1)")
        if self.n_clusters < 1 or self.text_vocab < 2:
            raise ConfigError("need n_clusters >= 1 and text_vocab >= 2")
        if not 0 <= self.identity_edit_fraction < 1:
            raise ConfigError("identity_edit_fraction must be in [0, 1)")
        if not 0 <= self.shared_target_fraction < 1:
            raise ConfigError("shared_target_fraction must be in [0, 1)")


def _random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return (q * np.sign(np.diag(r))).astype(np.float64)


def build_synthetic(spec: SyntheticSpec):
    """Generate matrices and triplets in memory; see write_synthetic for files."""
    rng = np.random.Generator(np.random.Philox(key=np.uint64(spec.seed)))
    d = spec.dim
    # every triplet contributes one reference; siblings reuse target images,
    # so references + unique targets add up to exactly n_images
    n_trip = int(round(spec.n_images / (2.0 - spec.shared_target_fraction)))
    n_base = spec.n_images - n_trip
    n_sib = n_trip - n_base
    if n_base < 2:
        raise ConfigError("shared_target_fraction leaves fewer than 2 targets")

    def unit(x):
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    centers = unit(rng.standard_normal((spec.n_clusters, d)))
    base_cluster = rng.integers(spec.n_clusters, size=n_base)
    z_ref_base = unit(centers[base_cluster]
                      + spec.cluster_spread * rng.standard_normal((n_base, d)))
    vocab = unit(rng.standard_normal((spec.text_vocab, d)))
    mod_word = rng.integers(spec.text_vocab, size=n_base)
    z_mod_base = vocab[mod_word].copy()
    # redundant-text triplets: the edit points along the reference itself,
    # leaving the target nearly equal to the reference
    identity = rng.random(n_base) < spec.identity_edit_fraction
    z_mod_base[identity] = unit(
        z_ref_base[identity] + 0.1 * rng.standard_normal((int(identity.sum()), d))
    )
    pre = (z_ref_base + z_mod_base
           + spec.noise * rng.standard_normal((n_base, d)))
    pre_scale = np.linalg.norm(pre, axis=1)
    z_tgt = pre / pre_scale[:, None]

    # sibling triplets hit popular targets from fresh same-cluster references;
    # the edit is solved so normalize(r + m + noise*g) lands exactly on the
    # shared target image
    if n_sib:
        popular = max(1, n_base // 10)
        sib_base = rng.integers(popular, size=n_sib)
        sib_cluster = base_cluster[sib_base]
        z_ref_sib = unit(centers[sib_cluster]
                         + spec.cluster_spread * rng.standard_normal((n_sib, d)))
        g_sib = rng.standard_normal((n_sib, d))
        z_mod_sib = (pre_scale[sib_base, None] * z_tgt[sib_base]
                     - z_ref_sib - spec.noise * g_sib)
        z_ref_all = np.concatenate([z_ref_base, z_ref_sib], axis=0)
        z_mod_all = np.concatenate([z_mod_base, z_mod_sib], axis=0)
        target_of = np.concatenate([np.arange(n_base), sib_base])
    else:
        z_ref_all, z_mod_all, target_of = z_ref_base, z_mod_base, np.arange(n_base)

    rot = _random_rotation(d, rng) if spec.modality_rotation else np.eye(d)

    ref_ids = [f"ref_{i:05d}" for i in range(n_trip)]
    tgt_ids = [f"tgt_{i:05d}" for i in range(n_base)]
    if spec.text_noise > 0 or n_sib:
        # imperfect text encoder: every triplet gets its own rendering
        text_ids = [f"mod_{i:05d}" for i in range(n_trip)]
        obs = (z_mod_all @ rot.T
               + spec.text_noise * rng.standard_normal((n_trip, d)))
        text_rows = unit(obs)

        def text_id(i: int) -> str:
            return text_ids[i]
    else:
        # exact text encoder: vocabulary words share one row each
        text_ids = [f"mod_{v:05d}" for v in range(spec.text_vocab)]
        rows = [vocab[v] for v in range(spec.text_vocab)]
        self_slot = {}
        for i in np.flatnonzero(identity):
            self_slot[int(i)] = len(text_ids)
            text_ids.append(f"mod_self_{i:05d}")
            rows.append(z_mod_base[int(i)])
        text_rows = np.stack(rows) @ rot.T

        def text_id(i: int) -> str:
            if identity[i]:
                return text_ids[self_slot[int(i)]]
            return text_ids[int(mod_word[i])]

    images = make_matrix(
        ref_ids + tgt_ids,
        np.concatenate([z_ref_all, z_tgt], axis=0).astype(np.float32),
    )
    texts = make_matrix(text_ids, text_rows.astype(np.float32))

    n_val = max(1, int(round(n_trip * spec.val_fraction)))
    val_idx = set(int(i) for i in rng.choice(n_trip, size=n_val, replace=False))

    train = [
        Triplet(ref_ids[i], text_id(i), tgt_ids[int(target_of[i])], "annotated")
        for i in range(n_trip) if i not in val_idx
    ]
    queries = []
    groups: dict[str, list[str]] = {}
    all_ids = images.ids
    for i in sorted(val_idx):
        gid = f"grp_{i:05d}"
        tgt = tgt_ids[int(target_of[i])]
        decoys = []
        while len(decoys) < spec.group_size - 1:
            c = all_ids[int(rng.integers(len(all_ids)))]
            if c not in (ref_ids[i], tgt) and c not in decoys:
                decoys.append(c)
        groups[gid] = sorted([tgt] + decoys)
        queries.append(EvalQuery(
            ref_id=ref_ids[i], text_id=text_id(i),
            target_id=tgt, group_id=gid,
        ))
    return images, texts, train, queries, groups


def write_synthetic(spec: SyntheticSpec, out_dir) -> dict[str, str]:
    """Write the synthetic dataset in the toolkit's on-disk formats."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images, texts, train, queries, groups = build_synthetic(spec)
    paths = {
        "images": str(out / "img.cire"),
        "texts": str(out / "txt.cire"),
        "triplets": str(out / "train_triplets.jsonl"),
        "queries": str(out / "val_queries.jsonl"),
        "groups": str(out / "groups.jsonl"),
        "meta": str(out / "meta.json"),
    }
    write_embeddings(images, paths["images"])
    write_embeddings(texts, paths["texts"])
    write_triplets(train, paths["triplets"])
    write_queries(queries, paths["queries"])
    write_groups(groups, paths["groups"])
    with open(paths["meta"], "w", encoding="utf-8") as fh:
        json.dump({
            "n_images": spec.n_images, "dim": spec.dim, "noise": spec.noise,
            "n_clusters": spec.n_clusters, "cluster_spread": spec.cluster_spread,
            "text_vocab": spec.text_vocab,
            "identity_edit_fraction": spec.identity_edit_fraction,
            "text_noise": spec.text_noise,
            "val_fraction": spec.val_fraction, "group_size": spec.group_size,
            "seed": spec.seed, "modality_rotation": spec.modality_rotation,
            "n_train": len(train), "n_val": len(queries),
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths
