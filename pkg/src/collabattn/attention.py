"""Concatenated and collaborative multi-head attention.

Shapes follow the row-vector convention: ``x`` is ``T x D_in`` (queries),
``y`` is ``T' x D_in`` (keys/values), projections multiply on the right.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .linalg import as_matrix, softmax_rows


@dataclass(frozen=True)
class AttentionDims:
    """Layer dimensions.

    ``d_k`` is the per-head key/query width; it also fixes the softmax
    temperature ``1/sqrt(d_k)`` for both layer forms so a converted layer
    scores exactly like its source.
    """

    d_in: int
    d_out: int
    n_heads: int
    d_k: int
    d_v: int

    def __post_init__(self):
        for name in ("d_in", "d_out", "n_heads", "d_k", "d_v"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"AttentionDims.{name} must be a positive integer, got {value!r}")

    @property
    def d_k_total(self) -> int:
        return self.n_heads * self.d_k

    @property
    def d_v_total(self) -> int:
        return self.n_heads * self.d_v

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.d_k)


class MixingKind(enum.Enum):
    BLOCKS_OF_ONE = "blocks_of_one"
    DENSE = "dense"


@dataclass(frozen=True)
class MixingMatrix:
    m: np.ndarray
    kind: MixingKind = MixingKind.DENSE

    def __post_init__(self):
        object.__setattr__(self, "m", as_matrix(self.m, "mixing"))

    @classmethod
    def blocks_of_one(cls, n_heads: int, d_k: int) -> "MixingMatrix":
        m = np.kron(np.eye(n_heads), np.ones((1, d_k)))
        return cls(m, MixingKind.BLOCKS_OF_ONE)

    @property
    def n_heads(self) -> int:
        return self.m.shape[0]

    @property
    def rank(self) -> int:
        return self.m.shape[1]


def _check_shape(name: str, arr: np.ndarray, shape: tuple[int, ...]) -> None:
    if arr.shape != shape:
        raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")


@dataclass(frozen=True)
class ConcatMHAParams:
    dims: AttentionDims
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    b_q: np.ndarray
    b_k: np.ndarray

    def __post_init__(self):
        d = self.dims
        for name in ("w_q", "w_k", "w_v", "w_o", "b_q", "b_k"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        _check_shape("w_q", self.w_q, (d.d_in, d.d_k_total))
        _check_shape("w_k", self.w_k, (d.d_in, d.d_k_total))
        _check_shape("w_v", self.w_v, (d.d_in, d.d_v_total))
        _check_shape("w_o", self.w_o, (d.d_v_total, d.d_out))
        _check_shape("b_q", self.b_q, (d.d_k_total,))
        _check_shape("b_k", self.b_k, (d.d_k_total,))

    def head_slice(self, i: int) -> slice:
        return slice(i * self.dims.d_k, (i + 1) * self.dims.d_k)

    def value_slice(self, i: int) -> slice:
        return slice(i * self.dims.d_v, (i + 1) * self.dims.d_v)

    def head(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """``(W_Q^(i), b_Q^(i), W_K^(i), b_K^(i))`` for head ``i``."""
        if not 0 <= i < self.dims.n_heads:
            raise IndexError(f"head {i} out of range for {self.dims.n_heads} heads")
        s = self.head_slice(i)
        return self.w_q[:, s], self.b_q[s], self.w_k[:, s], self.b_k[s]

    @classmethod
    def random(cls, dims: AttentionDims, rng: np.random.Generator, bias_scale: float = 1.0) -> "ConcatMHAParams":
        """Gaussian weights with variance ``1/fan_in``; biases scaled by ``bias_scale``."""
        g = rng.standard_normal
        return cls(
            dims,
            w_q=g((dims.d_in, dims.d_k_total)) / math.sqrt(dims.d_in),
            w_k=g((dims.d_in, dims.d_k_total)) / math.sqrt(dims.d_in),
            w_v=g((dims.d_in, dims.d_v_total)) / math.sqrt(dims.d_in),
            w_o=g((dims.d_v_total, dims.d_out)) / math.sqrt(dims.d_v_total),
            b_q=bias_scale * g(dims.d_k_total),
            b_k=bias_scale * g(dims.d_k_total),
        )


@dataclass(frozen=True)
class CollabMHAParams:
    dims: AttentionDims
    w_q_shared: np.ndarray
    w_k_shared: np.ndarray
    mixing: MixingMatrix
    content_bias: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    def __post_init__(self):
        d = self.dims
        for name in ("w_q_shared", "w_k_shared", "content_bias", "w_v", "w_o"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if not isinstance(self.mixing, MixingMatrix):
            object.__setattr__(self, "mixing", MixingMatrix(self.mixing))
        r = self.mixing.rank
        _check_shape("mixing", self.mixing.m, (d.n_heads, r))
        _check_shape("w_q_shared", self.w_q_shared, (d.d_in, r))
        _check_shape("w_k_shared", self.w_k_shared, (d.d_in, r))
        _check_shape("content_bias", self.content_bias, (d.n_heads, d.d_in))
        _check_shape("w_v", self.w_v, (d.d_in, d.d_v_total))
        _check_shape("w_o", self.w_o, (d.d_v_total, d.d_out))

    @property
    def d_k_shared(self) -> int:
        return self.mixing.rank

    def value_slice(self, i: int) -> slice:
        return slice(i * self.dims.d_v, (i + 1) * self.dims.d_v)


@dataclass(frozen=True)
class ScoreDecomposition:
    """The four additive terms of a biased, unscaled score matrix ``Q K^T``."""

    context: np.ndarray
    content: np.ndarray
    residual_col: np.ndarray
    residual_const: np.ndarray

    def total(self) -> np.ndarray:
        return self.context + self.content + self.residual_col + self.residual_const


def _inputs(x, y, d_in: int) -> tuple[np.ndarray, np.ndarray]:
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    if x.shape[1] != d_in or y.shape[1] != d_in:
        raise ShapeError(f"inputs must have {d_in} columns, got x {x.shape}, y {y.shape}")
    return x, y


def scaled_dot_attention(q, k, v, d: int | None = None) -> np.ndarray:
    """``softmax(q k^T / sqrt(d)) v``; ``d`` defaults to the key width."""
    q, k, v = as_matrix(q, "q"), as_matrix(k, "k"), as_matrix(v, "v")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    d = k.shape[1] if d is None else d
    if d < 1:
        raise ValueError("attention: scaling width must be >= 1")
    return softmax_rows(q @ k.T / math.sqrt(d)) @ v


def concat_scores(params: ConcatMHAParams, x, y) -> list[np.ndarray]:
    """Per-head scaled scores with biases applied literally to Q and K."""
    x, y = _inputs(x, y, params.dims.d_in)
    q = x @ params.w_q + params.b_q
    k = y @ params.w_k + params.b_k
    scores = []
    for i in range(params.dims.n_heads):
        s = params.head_slice(i)
        scores.append(q[:, s] @ k[:, s].T * params.dims.scale)
    return scores


def concat_probs(params: ConcatMHAParams, x, y) -> list[np.ndarray]:
    return [softmax_rows(s) for s in concat_scores(params, x, y)]


def concat_mha_forward(params: ConcatMHAParams, x, y) -> np.ndarray:
    x, y = _inputs(x, y, params.dims.d_in)
    v = y @ params.w_v
    heads = [
        p @ v[:, params.value_slice(i)] for i, p in enumerate(concat_probs(params, x, y))
    ]
    return np.hstack(heads) @ params.w_o


def collab_scores(params: CollabMHAParams, x, y) -> list[np.ndarray]:
    """Per-head scaled scores ``(X W_Q diag(m_i) W_K^T Y^T + 1 v_i^T Y^T) / sqrt(d_k)``."""
    x, y = _inputs(x, y, params.dims.d_in)
    q = x @ params.w_q_shared
    k = y @ params.w_k_shared
    content = params.content_bias @ y.T
    m = params.mixing.m
    return [
        ((q * m[i]) @ k.T + content[i]) * params.dims.scale for i in range(params.dims.n_heads)
    ]


def collab_probs(params: CollabMHAParams, x, y) -> list[np.ndarray]:
    return [softmax_rows(s) for s in collab_scores(params, x, y)]


def collab_mha_forward(params: CollabMHAParams, x, y) -> np.ndarray:
    x, y = _inputs(x, y, params.dims.d_in)
    v = y @ params.w_v
    heads = [
        p @ v[:, params.value_slice(i)] for i, p in enumerate(collab_probs(params, x, y))
    ]
    return np.hstack(heads) @ params.w_o


def score_decomposition(w_q_head, b_q_head, w_k_head, b_k_head, x, y) -> ScoreDecomposition:
    """Split one head's unscaled biased scores into context, content and row-constant terms."""
    w_q = as_matrix(w_q_head, "w_q_head")
    w_k = as_matrix(w_k_head, "w_k_head")
    b_q = np.asarray(b_q_head, dtype=np.float64)
    b_k = np.asarray(b_k_head, dtype=np.float64)
    if w_q.shape != w_k.shape or b_q.shape != (w_q.shape[1],) or b_k.shape != (w_k.shape[1],):
        raise ShapeError(
            f"score_decomposition: w_q {w_q.shape}, b_q {b_q.shape}, w_k {w_k.shape}, b_k {b_k.shape}"
        )
    x, y = _inputs(x, y, w_q.shape[0])
    t, t_prime = x.shape[0], y.shape[0]
    xq = x @ w_q
    yk = y @ w_k
    return ScoreDecomposition(
        context=xq @ yk.T,
        content=np.broadcast_to(yk @ b_q, (t, t_prime)).copy(),
        residual_col=np.broadcast_to((xq @ b_k)[:, None], (t, t_prime)).copy(),
        residual_const=np.full((t, t_prime), b_q @ b_k),
    )


def fold_key_bias(params: ConcatMHAParams) -> np.ndarray:
    """Rows ``v_i = W_K^(i) b_Q^(i)``; the key bias has no effect after softmax and is dropped."""
    n = params.dims.n_heads
    out = np.empty((n, params.dims.d_in))
    for i in range(n):
        _, b_q, w_k, _ = params.head(i)
        out[i] = w_k @ b_q
    return out
