"""Contrastive training: in-batch and full-corpus losses, AdamW, two stages.

Stage one trains both the query fusion head and the target projection with
in-batch softmax contrastive loss. Stage two freezes the target side,
caches every candidate's projected representation once, and trains the
query side against the whole candidate corpus as static negatives, with a
chunked running log-sum-exp so memory stays O(batch x chunk).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError, NumericsError
from .forge import Triplet
from .model import (
    MATRIX_PARAMS,
    Checkpoint,
    FusionParams,
    Gradients,
    encode_query_batch,
    encode_target_batch,
    backward,
    init_params,
)
from .store import EmbeddingMatrix, make_matrix

NEG_METHODS = ("ref_replace", "text_replace", "target_replace", "query_replace")

# Study labels follow the construction-method numbering used throughout:
# 1 replaces the reference image, 2 the modified text, 3 the target image,
# 4 the whole query pair.
NEG_METHOD_LABELS = {
    "ref_replace": 1,
    "text_replace": 2,
    "target_replace": 3,
    "query_replace": 4,
}

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CORPUS_CHUNK = 4096


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.05
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 1
    stage: str = "one"  # "one" | "two"
    neg_method: str = "target_replace"
    seed: int = 0
    hidden: int | None = None
    neg_pool: int | None = None  # stage two: cap on per-step negative pool size

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.stage not in ("one", "two"):
            raise ConfigError(f"stage must be 'one' or 'two', got {self.stage!r}")
        if self.neg_method not in NEG_METHODS:
            raise ConfigError(f"unknown neg_method {self.neg_method!r}")
        if self.stage == "two" and self.neg_method != "target_replace":
            raise ConfigError(
                "stage two is defined over replaced targets only "
                f"(neg_method must be target_replace, got {self.neg_method!r})"
            )
        if self.neg_pool is not None and self.neg_pool < self.batch_size:
            raise ConfigError("neg_pool must be >= batch_size (positives included)")


@dataclass(frozen=True)
class TrainExample:
    """One positive pair with one or more modified-text renderings."""

    ref_id: str
    texts: tuple[str, ...]
    target_id: str


@dataclass
class TrainData:
    examples: list[TrainExample]
    images: EmbeddingMatrix  # normalized, holds every ref and target id
    texts: EmbeddingMatrix   # normalized, keyed by modified-text string

    def __post_init__(self):
        if not self.images.normalized or not self.texts.normalized:
            raise ConfigError("train stores must be normalized")
        for ex in self.examples:
            if ex.ref_id not in self.images:
                raise DataFormatError(f"ref id {ex.ref_id!r} missing from image store")
            if ex.target_id not in self.images:
                raise DataFormatError(f"target id {ex.target_id!r} missing from image store")
            for text in ex.texts:
                if text not in self.texts:
                    raise DataFormatError(f"text {text!r} missing from text store")


def examples_from_triplets(triplets: list[Triplet]) -> list[TrainExample]:
    """Group generated renderings of one (ref, target) pair into one example.

    Annotated triplets stay one example per record; generated triplets that
    share a pair carry all their template renderings so the trainer can pick
    one uniformly per step.
    """
    out: list[TrainExample] = []
    generated: dict[tuple[str, str], list[Triplet]] = {}
    order: list[tuple[str, str]] = []
    for t in triplets:
        if t.provenance == "annotated":
            out.append(TrainExample(t.ref_id, (t.modified_text,), t.target_id))
        else:
            key = (t.ref_id, t.target_id)
            if key not in generated:
                generated[key] = []
                order.append(key)
            generated[key].append(t)
    for key in order:
        group = sorted(generated[key], key=lambda t: (t.template_id, t.modified_text))
        out.append(TrainExample(key[0], tuple(t.modified_text for t in group), key[1]))
    return out


# --- losses ------------------------------------------------------------------

def _check_tau(tau: float) -> None:
    if tau <= 0:
        raise ConfigError(f"tau must be > 0, got {tau}")


def _softmax_ce_rows(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy with diagonal labels; returns (loss, dlogits)."""
    if not np.isfinite(logits).all():
        raise NumericsError("non-finite contrastive logits")
    b = logits.shape[0]
    rowmax = logits.max(axis=1, keepdims=True)
    shifted = logits - rowmax
    expl = np.exp(shifted)
    denom = expl.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)
    loss = float(-log_probs[np.arange(b), np.arange(b)].mean())
    dlogits = expl / denom
    dlogits[np.arange(b), np.arange(b)] -= 1.0
    dlogits /= b
    return loss, dlogits


def loss_in_batch(Q: np.ndarray, T: np.ndarray, tau: float):
    """In-batch contrastive loss over diagonal pairs.

    loss = (1/B) sum_i -log( exp(q_i.t_i / tau) / sum_j exp(q_i.t_j / tau) )

    Returns (loss, dL/dQ, dL/dT) with gradients w.r.t. the unit vectors.
    """
    _check_tau(tau)
    Q = np.atleast_2d(Q)
    T = np.atleast_2d(T)
    if Q.shape != T.shape:
        raise DataFormatError(f"query/target shape mismatch {Q.shape} vs {T.shape}")
    Q64 = Q.astype(np.float64)
    T64 = T.astype(np.float64)
    logits = (Q64 @ T64.T) / tau
    loss, dlogits = _softmax_ce_rows(logits)
    dQ = (dlogits @ T64) / tau
    dT = (dlogits.T @ Q64) / tau
    return loss, dQ, dT


@dataclass
class NegativeCache:
    """Frozen target representations of the whole candidate corpus."""

    corpus: EmbeddingMatrix  # unit rows, ids = candidate image ids
    built_from: str          # fingerprint of the Wt bytes that produced it


def cache_targets(ckpt: Checkpoint, corpus_embeddings: EmbeddingMatrix,
                  chunk: int = CORPUS_CHUNK) -> NegativeCache:
    """Run every corpus row through the frozen target projection."""
    if not corpus_embeddings.normalized:
        raise ConfigError("corpus must be normalized before caching")
    rows = []
    for lo in range(0, corpus_embeddings.n, chunk):
        block = corpus_embeddings.data[lo:lo + chunk]
        rows.append(encode_target_batch(ckpt.params, block).Out)
    data = np.concatenate(rows, axis=0) if rows else np.zeros((0, ckpt.params.dim), np.float32)
    matrix = make_matrix(corpus_embeddings.ids, data, normalized=True)
    return NegativeCache(corpus=matrix, built_from=ckpt.wt_fingerprint())


def _streamed_softmax(Q64: np.ndarray, G: np.ndarray, pos_rows: np.ndarray,
                      tau: float, chunk: int):
    """Softmax over all rows of G per query, single pass, running LSE.

    Returns (loss, dQ64) for the mean -log softmax at each query's positive
    row. G rows are the static negatives (positives included).
    """
    b = Q64.shape[0]
    m = np.full(b, -np.inf)
    s = np.zeros(b)
    w = np.zeros_like(Q64)
    for lo in range(0, G.shape[0], chunk):
        Gc = G[lo:lo + chunk].astype(np.float64)
        L = (Q64 @ Gc.T) / tau
        if not np.isfinite(L).all():
            raise NumericsError("non-finite contrastive logits")
        cmax = L.max(axis=1)
        new_m = np.maximum(m, cmax)
        scale = np.exp(m - new_m)
        E = np.exp(L - new_m[:, None])
        s = s * scale + E.sum(axis=1)
        w = w * scale[:, None] + E @ Gc
        m = new_m
    pos_vec = G[pos_rows].astype(np.float64)
    pos_logit = np.einsum("ij,ij->i", Q64, pos_vec) / tau
    log_z = np.log(s) + m
    loss = float(np.mean(log_z - pos_logit))
    dQ = (w / s[:, None] - pos_vec) / (tau * b)
    return loss, dQ


def loss_full_corpus(Q: np.ndarray, target_ids, cache: NegativeCache, tau: float,
                     chunk: int = CORPUS_CHUNK, pool_rows: np.ndarray | None = None):
    """Contrastive loss against the full cached corpus as static negatives.

    The denominator sums over every cached row (the positive included);
    traversal is chunked with a per-query running log-sum-exp. Returns
    (loss, dL/dQ); the target side is frozen so no target gradient exists.

    pool_rows restricts the denominator to a subset of corpus rows for
    negative-count ablations; it must contain every positive row.
    """
    _check_tau(tau)
    Q = np.atleast_2d(Q)
    pos = np.array([cache.corpus.index_of(t) for t in target_ids], dtype=np.int64)
    if len(pos) != Q.shape[0]:
        raise DataFormatError(f"{Q.shape[0]} queries for {len(pos)} target ids")
    Q64 = Q.astype(np.float64)
    if pool_rows is None:
        G = cache.corpus.data
        pos_rows = pos
    else:
        pool_rows = np.asarray(pool_rows, dtype=np.int64)
        lookup = {int(r): i for i, r in enumerate(pool_rows)}
        missing = [int(p) for p in pos if int(p) not in lookup]
        if missing:
            raise DataFormatError(f"pool excludes positive corpus rows {missing}")
        G = cache.corpus.data[pool_rows]
        pos_rows = np.array([lookup[int(p)] for p in pos], dtype=np.int64)
    return _streamed_softmax(Q64, G, pos_rows, tau, chunk)


# --- negative construction ---------------------------------------------------

@dataclass(frozen=True)
class NegativePlan:
    """Per-batch arrangement of negatives for one construction method.

    target_replace keeps the standard in-batch arrangement (rows is None).
    The other methods list, per positive i, the (ref_id, text) sources of
    its B-1 perturbed queries, each scored against the fixed target t_i.
    """

    method: str
    rows: list[list[tuple[str, str]]] | None


def build_negative_batch(batch: list[TrainExample], method: str,
                         pool: list[TrainExample], seed: int = 0,
                         batch_texts: list[str] | None = None) -> NegativePlan:
    """Materialize the negative arrangement for one batch.

    batch_texts pins the per-step text realization of each batch example
    (defaults to each example's first rendering).
    """
    if method not in NEG_METHODS:
        raise ConfigError(f"unknown neg_method {method!r}")
    if method == "target_replace":
        return NegativePlan(method=method, rows=None)
    if batch_texts is None:
        batch_texts = [ex.texts[0] for ex in batch]
    b = len(batch)
    if b >= 2:
        partners = [[j for j in range(b) if j != i] for i in range(b)]
        sources = list(zip(batch, batch_texts))
    else:
        others = [ex for ex in pool if ex != batch[0]]
        if not others:
            raise ConfigError("negative pool of size 1 cannot supply a partner")
        rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
        pick = others[int(rng.integers(len(others)))]
        sources = list(zip(batch, batch_texts)) + [(pick, pick.texts[0])]
        partners = [[1]]
    rows: list[list[tuple[str, str]]] = []
    for i, (ex, text) in enumerate(zip(batch, batch_texts)):
        row: list[tuple[str, str]] = []
        for j in partners[i]:
            other, other_text = sources[j]
            if method == "ref_replace":
                row.append((other.ref_id, text))
            elif method == "text_replace":
                row.append((ex.ref_id, other_text))
            else:  # query_replace
                row.append((other.ref_id, other_text))
        rows.append(row)
    return NegativePlan(method=method, rows=rows)


def _perturbed_query_loss(params: FusionParams, data: TrainData,
                          batch: list[TrainExample], batch_texts: list[str],
                          plan: NegativePlan, tau: float):
    """Loss for the three perturbed-query methods plus its gradients.

    Row i's logits are the positive q_i.t_i in slot i and the perturbed
    queries' scores against the same t_i elsewhere.
    """
    b = len(batch)
    R = data.images.rows([ex.ref_id for ex in batch])
    M = data.texts.rows(batch_texts)
    T = data.images.rows([ex.target_id for ex in batch])
    q_trace = encode_query_batch(params, R, M)
    t_trace = encode_target_batch(params, T)
    flat_sources = [src for row in plan.rows for src in row]
    Rp = data.images.rows([ref for ref, _ in flat_sources])
    Mp = data.texts.rows([text for _, text in flat_sources])
    p_trace = encode_query_batch(params, Rp, Mp)
    k = b - 1 if b >= 2 else 1
    cols = k + 1
    Qp = p_trace.Q.reshape(b, k, -1)
    logits = np.empty((b, cols), dtype=np.float64)
    T64 = t_trace.Out.astype(np.float64)
    # slot layout per row: perturbed queries first, positive in the last slot
    logits[:, :k] = np.einsum("ikd,id->ik", Qp.astype(np.float64), T64) / tau
    logits[:, k] = np.einsum("id,id->i", q_trace.Q.astype(np.float64), T64) / tau
    if not np.isfinite(logits).all():
        raise NumericsError("non-finite contrastive logits")
    rowmax = logits.max(axis=1, keepdims=True)
    expl = np.exp(logits - rowmax)
    denom = expl.sum(axis=1, keepdims=True)
    loss = float(np.mean(np.log(denom[:, 0]) + rowmax[:, 0] - logits[:, k]))
    dlogits = expl / denom
    dlogits[:, k] -= 1.0
    dlogits /= b
    dQ = dlogits[:, k:k + 1] * T64 / tau
    dQp = (dlogits[:, :k, None] * T64[:, None, :] / tau).reshape(b * k, -1)
    dT = (dlogits[:, k:k + 1] * q_trace.Q.astype(np.float64)
          + np.einsum("ik,ikd->id", dlogits[:, :k], Qp.astype(np.float64))) / tau
    g_pos = backward(params, q_trace, dQ, t_trace, dT)
    g_pert = backward(params, p_trace, dQp)
    grads = Gradients(
        W1=g_pos.W1 + g_pert.W1,
        b1=g_pos.b1 + g_pert.b1,
        W2=g_pos.W2 + g_pert.W2,
        b2=g_pos.b2 + g_pert.b2,
        Wt=g_pos.Wt,
    )
    return loss, grads


# --- optimizer ---------------------------------------------------------------

def adamw_step(ckpt: Checkpoint, grads: Gradients, lr: float, weight_decay: float,
               frozen: tuple[str, ...] = ()) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Decay hits matrices only, never biases; frozen parameter blocks are
    skipped entirely (values and moments untouched).
    """
    ckpt.step += 1
    t = ckpt.step
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name, g in grads.arrays().items():
        if name in frozen:
            continue
        p = getattr(ckpt.params, name)
        m = ckpt.exp_avg[name]
        v = ckpt.exp_avg_sq[name]
        g = g.astype(np.float32)
        m[:] = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v[:] = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if weight_decay and name in MATRIX_PARAMS:
            update = update + weight_decay * p
        p -= lr * update


# --- training loop -----------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    step: int
    loss: float
    val_rmean: float | None
    stage: int


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int | None = None


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(key=np.array([seed, epoch], dtype=np.uint64))
    )


def train(
    data: TrainData,
    cfg: TrainConfig,
    init: Checkpoint | None = None,
    cache: NegativeCache | None = None,
    val_fn=None,
    log_fh=None,
) -> TrainResult:
    """Run one stage of fine-tuning.

    Stage one needs no cache and may start fresh; stage two requires an
    init checkpoint plus a NegativeCache built from that checkpoint's
    frozen target projection. `val_fn(checkpoint) -> rmean` is called after
    every epoch when given; the returned checkpoint is the best-validation
    epoch (ties to the earliest), or the final one without validation.
    """
    if not data.examples:
        raise DataFormatError("no training examples")
    dim = data.images.dim
    if cfg.stage == "two":
        if init is None:
            raise ConfigError("stage two requires an init checkpoint")
        if cache is None:
            raise ConfigError("stage two requires a negative cache")
        if cache.built_from != init.wt_fingerprint():
            raise DataFormatError(
                "negative cache fingerprint does not match the init checkpoint "
                f"({cache.built_from[:12]} vs {init.wt_fingerprint()[:12]})"
            )
    ckpt = init if init is not None else Checkpoint.fresh(
        init_params(dim, cfg.hidden, seed=cfg.seed)
    )
    wt_before = ckpt.params.Wt.copy()
    n = len(data.examples)
    result = TrainResult(checkpoint=ckpt)
    best_val = None
    best_snapshot = None
    global_step = ckpt.step
    for epoch in range(cfg.epochs):
        rng = _epoch_rng(cfg.seed, epoch)
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            batch = [data.examples[int(i)] for i in order[lo:lo + cfg.batch_size]]
            texts = [
                ex.texts[int(rng.integers(len(ex.texts)))] if len(ex.texts) > 1
                else ex.texts[0]
                for ex in batch
            ]
            if cfg.stage == "one":
                loss, grads = _stage_one_step(ckpt.params, data, batch, texts, cfg)
                frozen: tuple[str, ...] = ()
            else:
                loss, grads = _stage_two_step(ckpt.params, data, batch, texts, cfg,
                                              cache, rng)
                frozen = ("Wt",)
            global_step += 1
            if not np.isfinite(loss):
                raise NumericsError(f"NaN loss at step {global_step}")
            adamw_step(ckpt, grads, cfg.lr, cfg.weight_decay, frozen=frozen)
            ckpt.params.check_finite()
            losses.append(loss)
        val = float(val_fn(ckpt)) if val_fn is not None else None
        em = EpochMetrics(
            epoch=epoch,
            step=global_step,
            loss=float(np.mean(losses)),
            val_rmean=val,
            stage=1 if cfg.stage == "one" else 2,
        )
        result.metrics.append(em)
        if log_fh is not None:
            log_fh.write(json.dumps({
                "epoch": em.epoch, "step": em.step, "loss": em.loss,
                "val_rmean": em.val_rmean, "stage": em.stage,
            }, sort_keys=True) + "\n")
            log_fh.flush()
        if val is not None and (best_val is None or val > best_val):
            best_val = val
            best_snapshot = _snapshot(ckpt)
            result.best_epoch = epoch
    if best_snapshot is not None:
        result.checkpoint = best_snapshot
    if cfg.stage == "two" and cfg.epochs > 0:
        if not np.array_equal(result.checkpoint.params.Wt, wt_before):
            raise NumericsError("frozen target projection changed during stage two")
    return result


def _snapshot(ckpt: Checkpoint) -> Checkpoint:
    return Checkpoint(
        params=ckpt.params.copy(),
        exp_avg={k: v.copy() for k, v in ckpt.exp_avg.items()},
        exp_avg_sq={k: v.copy() for k, v in ckpt.exp_avg_sq.items()},
        step=ckpt.step,
    )


def _stage_one_step(params, data: TrainData, batch, texts, cfg: TrainConfig):
    plan = build_negative_batch(batch, cfg.neg_method, data.examples,
                                seed=cfg.seed, batch_texts=texts)
    if plan.rows is not None:
        return _perturbed_query_loss(params, data, batch, texts, plan, cfg.tau)
    R = data.images.rows([ex.ref_id for ex in batch])
    M = data.texts.rows(texts)
    T = data.images.rows([ex.target_id for ex in batch])
    q_trace = encode_query_batch(params, R, M)
    t_trace = encode_target_batch(params, T)
    loss, dQ, dT = loss_in_batch(q_trace.Q, t_trace.Out, cfg.tau)
    grads = backward(params, q_trace, dQ, t_trace, dT)
    return loss, grads


def _stage_two_step(params, data: TrainData, batch, texts, cfg: TrainConfig,
                    cache: NegativeCache, rng: np.random.Generator):
    R = data.images.rows([ex.ref_id for ex in batch])
    M = data.texts.rows(texts)
    q_trace = encode_query_batch(params, R, M)
    target_ids = [ex.target_id for ex in batch]
    pool_rows = None
    if cfg.neg_pool is not None and cfg.neg_pool < cache.corpus.n:
        pos = np.unique([cache.corpus.index_of(t) for t in target_ids])
        others = np.setdiff1d(np.arange(cache.corpus.n), pos, assume_unique=False)
        extra = cfg.neg_pool - len(pos)
        if extra > 0 and len(others):
            take = min(extra, len(others))
            pick = rng.choice(len(others), size=take, replace=False)
            pool_rows = np.concatenate([pos, others[np.sort(pick)]])
        else:
            pool_rows = pos
    loss, dQ = loss_full_corpus(q_trace.Q, target_ids, cache, cfg.tau,
                                pool_rows=pool_rows)
    grads = backward(params, q_trace, dQ)
    return loss, grads
