"""Trainable fusion head over precomputed embeddings.

The query side fuses a reference-image embedding r and a modified-text
embedding m through a one-hidden-layer ReLU MLP with a residual sum path:

    u = W2 @ relu(W1 @ [r; m] + b1) + b2 + r + m,   q = u / ||u||

so zero-initialized weights reduce to plain sum fusion. The target side is
a linear projection v = Wt @ t followed by the same normalization. Both
forward passes record the activations needed for exact analytic gradients,
including the normalization Jacobian (I - q q^T)/||u||.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, NumericsError

CKPT_MAGIC = b"CIRM"
CKPT_VERSION = 1

PARAM_NAMES = ("W1", "b1", "W2", "b2", "Wt")
MATRIX_PARAMS = ("W1", "W2", "Wt")  # weight decay applies to these only

_DEGENERATE_NORM = 1e-8


@dataclass
class FusionParams:
    W1: np.ndarray  # (h, 2d)
    b1: np.ndarray  # (h,)
    W2: np.ndarray  # (d, h)
    b2: np.ndarray  # (d,)
    Wt: np.ndarray  # (d, d)

    @property
    def dim(self) -> int:
        return self.W2.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "FusionParams":
        return FusionParams(**{k: v.copy() for k, v in self.arrays().items()})

    def check_finite(self) -> None:
        for name, arr in self.arrays().items():
            if not np.isfinite(arr).all():
                raise NumericsError(f"non-finite values in parameter {name}")


def init_params(dim: int, hidden: int | None = None, seed: int = 0) -> FusionParams:
    """Uniform(-1/sqrt(fan_in), +) weights, zero biases, identity target map."""
    h = dim if hidden is None else hidden
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    bound1 = 1.0 / np.sqrt(2 * dim)
    bound2 = 1.0 / np.sqrt(h)
    return FusionParams(
        W1=rng.uniform(-bound1, bound1, size=(h, 2 * dim)).astype(np.float32),
        b1=np.zeros(h, dtype=np.float32),
        W2=rng.uniform(-bound2, bound2, size=(dim, h)).astype(np.float32),
        b2=np.zeros(dim, dtype=np.float32),
        Wt=np.eye(dim, dtype=np.float32),
    )


@dataclass
class QueryTrace:
    """Forward activations for a batch of queries."""

    X: np.ndarray      # (B, 2d) concat inputs
    Z: np.ndarray      # (B, h) pre-activation
    A: np.ndarray      # (B, h) hidden
    U: np.ndarray      # (B, d) pre-norm
    unorm: np.ndarray  # (B,)
    Q: np.ndarray      # (B, d) unit outputs


@dataclass
class TargetTrace:
    T: np.ndarray      # (B, d) inputs
    V: np.ndarray      # (B, d) pre-norm
    vnorm: np.ndarray  # (B,)
    Out: np.ndarray    # (B, d) unit outputs


def encode_query_batch(params: FusionParams, R: np.ndarray, M: np.ndarray) -> QueryTrace:
    R = np.atleast_2d(np.asarray(R, dtype=np.float32))
    M = np.atleast_2d(np.asarray(M, dtype=np.float32))
    if R.shape != M.shape or R.shape[1] != params.dim:
        raise DataFormatError(
            f"query inputs {R.shape} / {M.shape} do not match dim {params.dim}"
        )
    X = np.concatenate([R, M], axis=1)
    Z = X @ params.W1.T + params.b1
    A = np.maximum(Z, 0.0)
    U = A @ params.W2.T + params.b2 + R + M
    unorm = np.linalg.norm(U, axis=1)
    if (unorm < _DEGENERATE_NORM).any():
        raise NumericsError("degenerate pre-norm query vector (norm < 1e-8)")
    Q = U / unorm[:, None]
    return QueryTrace(X=X, Z=Z, A=A, U=U, unorm=unorm, Q=Q)


def encode_query(params: FusionParams, r: np.ndarray, m: np.ndarray):
    """Single-vector convenience wrapper; returns (q, trace)."""
    trace = encode_query_batch(params, r[None, :], m[None, :])
    return trace.Q[0], trace


def encode_target_batch(params: FusionParams, T: np.ndarray) -> TargetTrace:
    T = np.atleast_2d(np.asarray(T, dtype=np.float32))
    if T.shape[1] != params.dim:
        raise DataFormatError(f"target inputs {T.shape} do not match dim {params.dim}")
    V = T @ params.Wt.T
    vnorm = np.linalg.norm(V, axis=1)
    if (vnorm < _DEGENERATE_NORM).any():
        raise NumericsError("degenerate projected target vector (norm < 1e-8)")
    Out = V / vnorm[:, None]
    return TargetTrace(T=T, V=V, vnorm=vnorm, Out=Out)


def encode_target(params: FusionParams, t: np.ndarray, frozen: bool = False) -> np.ndarray:
    """Project and unit-normalize one target embedding.

    `frozen` is a caller-side contract: gradients must not be routed into
    Wt for representations produced under frozen=True.
    """
    del frozen  # the flag documents intent; projection math is identical
    return encode_target_batch(params, t[None, :]).Out[0]


@dataclass
class Gradients:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wt: np.ndarray | None

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}
        if self.Wt is not None:
            out["Wt"] = self.Wt
        return out


def _through_normalization(dOut: np.ndarray, Out: np.ndarray, norm: np.ndarray) -> np.ndarray:
    # (I - out out^T) / ||pre|| applied row-wise
    inner = np.sum(Out * dOut, axis=1, keepdims=True)
    return (dOut - inner * Out) / norm[:, None]


def backward(
    params: FusionParams,
    q_trace: QueryTrace | None,
    dQ: np.ndarray | None,
    t_trace: TargetTrace | None = None,
    dOut: np.ndarray | None = None,
    frozen_target: bool = False,
) -> Gradients:
    """Exact parameter gradients for a forward batch.

    dQ / dOut are upstream gradients w.r.t. the unit-normalized query and
    target outputs. Accumulation runs in float64 (the normalization
    Jacobian cancels catastrophically in f32); results come back as f32.
    Wt gradients are omitted when frozen_target is set.
    """
    d, h = params.dim, params.hidden
    gW1 = np.zeros((h, 2 * d), dtype=np.float32)
    gb1 = np.zeros(h, dtype=np.float32)
    gW2 = np.zeros((d, h), dtype=np.float32)
    gb2 = np.zeros(d, dtype=np.float32)
    if q_trace is not None:
        dQ = np.asarray(dQ, dtype=np.float64)
        if dQ.shape != q_trace.Q.shape:
            raise DataFormatError(
                f"upstream query gradient shape {dQ.shape} != {q_trace.Q.shape}"
            )
        Q = q_trace.Q.astype(np.float64)
        dU = _through_normalization(dQ, Q, q_trace.unorm.astype(np.float64))
        A = q_trace.A.astype(np.float64)
        gW2 = (dU.T @ A).astype(np.float32)
        gb2 = dU.sum(axis=0).astype(np.float32)
        dA = dU @ params.W2.astype(np.float64)
        dZ = dA * (q_trace.Z > 0)
        gW1 = (dZ.T @ q_trace.X.astype(np.float64)).astype(np.float32)
        gb1 = dZ.sum(axis=0).astype(np.float32)
    gWt = None
    if t_trace is not None and not frozen_target:
        dOut = np.asarray(dOut, dtype=np.float64)
        if dOut.shape != t_trace.Out.shape:
            raise DataFormatError(
                f"upstream target gradient shape {dOut.shape} != {t_trace.Out.shape}"
            )
        Out = t_trace.Out.astype(np.float64)
        dV = _through_normalization(dOut, Out, t_trace.vnorm.astype(np.float64))
        gWt = (dV.T @ t_trace.T.astype(np.float64)).astype(np.float32)
    return Gradients(W1=gW1, b1=gb1, W2=gW2, b2=gb2, Wt=gWt)


# --- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    params: FusionParams
    exp_avg: dict[str, np.ndarray]
    exp_avg_sq: dict[str, np.ndarray]
    step: int

    @classmethod
    def fresh(cls, params: FusionParams) -> "Checkpoint":
        zeros = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        return cls(
            params=params,
            exp_avg=zeros,
            exp_avg_sq={k: v.copy() for k, v in zeros.items()},
            step=0,
        )

    def wt_fingerprint(self) -> str:
        return hashlib.sha256(
            np.ascontiguousarray(self.params.Wt, dtype="<f4").tobytes()
        ).hexdigest()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    p = ckpt.params
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHII", CKPT_MAGIC, CKPT_VERSION, p.dim, p.hidden))
        for name in PARAM_NAMES:
            fh.write(np.ascontiguousarray(p.arrays()[name], dtype="<f4").tobytes())
        for moments in (ckpt.exp_avg, ckpt.exp_avg_sq):
            for name in PARAM_NAMES:
                fh.write(np.ascontiguousarray(moments[name], dtype="<f4").tobytes())
        fh.write(struct.pack("<Q", ckpt.step))


def _param_shapes(d: int, h: int) -> dict[str, tuple[int, ...]]:
    return {"W1": (h, 2 * d), "b1": (h,), "W2": (d, h), "b2": (d,), "Wt": (d, d)}


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    head = struct.Struct("<4sHII")
    if len(raw) < head.size:
        raise DataFormatError(f"{path}: truncated checkpoint header")
    magic, version, d, h = head.unpack_from(raw, 0)
    if magic != CKPT_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    shapes = _param_shapes(d, h)
    off = head.size
    blocks = []
    for _ in range(3):  # params, exp_avg, exp_avg_sq
        block = {}
        for name in PARAM_NAMES:
            count = int(np.prod(shapes[name]))
            nbytes = count * 4
            if off + nbytes > len(raw):
                raise DataFormatError(f"{path}: truncated tensor {name}")
            block[name] = (
                np.frombuffer(raw, dtype="<f4", count=count, offset=off)
                .reshape(shapes[name])
                .copy()
            )
            off += nbytes
        blocks.append(block)
    if off + 8 != len(raw):
        raise DataFormatError(f"{path}: bad trailing length (expected 8-byte step)")
    (step,) = struct.unpack_from("<Q", raw, off)
    params = FusionParams(**blocks[0])
    return Checkpoint(params=params, exp_avg=blocks[1], exp_avg_sq=blocks[2], step=step)


def checkpoint_fingerprint(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
