"""Hand-derived gradients for collaborative attention and a toy trainer.

The backward pass differentiates ``<upstream, collab_mha_forward(...)>``
with respect to every parameter.  Concatenated-layer gradients reuse it
through the blocks-of-one expansion, since that expansion is exact.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from .attention import (
    AttentionDims,
    CollabMHAParams,
    ConcatMHAParams,
    MixingKind,
    MixingMatrix,
    collab_mha_forward,
    concat_mha_forward,
)
from .decompose import exact_expand
from .errors import ShapeError, TrainingError
from .linalg import as_matrix, softmax_rows

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CollabGradients:
    g_w_q_shared: np.ndarray
    g_w_k_shared: np.ndarray
    g_mixing: np.ndarray
    g_content_bias: np.ndarray
    g_w_v: np.ndarray
    g_w_o: np.ndarray


@dataclass(frozen=True)
class ConcatGradients:
    g_w_q: np.ndarray
    g_w_k: np.ndarray
    g_w_v: np.ndarray
    g_w_o: np.ndarray
    g_b_q: np.ndarray
    g_b_k: np.ndarray


def collab_backward(params: CollabMHAParams, x, y, upstream) -> CollabGradients:
    d = params.dims
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    g_out = as_matrix(upstream, "upstream")
    if x.shape[1] != d.d_in or y.shape[1] != d.d_in:
        raise ShapeError(f"inputs must have {d.d_in} columns, got x {x.shape}, y {y.shape}")
    if g_out.shape != (x.shape[0], d.d_out):
        raise ShapeError(f"upstream: expected {(x.shape[0], d.d_out)}, got {g_out.shape}")

    m = params.mixing.m
    q = x @ params.w_q_shared
    k = y @ params.w_k_shared
    v = y @ params.w_v
    content = params.content_bias @ y.T

    probs = []
    heads = []
    for i in range(d.n_heads):
        p = softmax_rows(((q * m[i]) @ k.T + content[i]) * d.scale)
        probs.append(p)
        heads.append(p @ v[:, params.value_slice(i)])
    h_cat = np.hstack(heads)

    g_w_o = h_cat.T @ g_out
    g_h = g_out @ params.w_o.T

    g_q = np.zeros_like(q)
    g_k = np.zeros_like(k)
    g_v = np.zeros_like(v)
    g_mixing = np.zeros_like(m)
    g_content = np.zeros_like(params.content_bias)
    for i, p in enumerate(probs):
        sl = params.value_slice(i)
        g_hi = g_h[:, sl]
        g_v[:, sl] = p.T @ g_hi
        g_p = g_hi @ v[:, sl].T
        # softmax Jacobian-vector product, then undo the 1/sqrt(d_k) scale
        g_z = p * (g_p - np.sum(g_p * p, axis=1, keepdims=True)) * d.scale
        g_zk = g_z @ k
        g_mixing[i] = np.sum(q * g_zk, axis=0)
        g_q += g_zk * m[i]
        g_k += (g_z.T @ q) * m[i]
        g_content[i] = y.T @ g_z.sum(axis=0)

    return CollabGradients(
        g_w_q_shared=x.T @ g_q,
        g_w_k_shared=y.T @ g_k,
        g_mixing=g_mixing,
        g_content_bias=g_content,
        g_w_v=y.T @ g_v,
        g_w_o=g_w_o,
    )


def concat_backward(params: ConcatMHAParams, x, y, upstream) -> ConcatGradients:
    """Gradients of ``<upstream, concat_mha_forward(...)>``.

    The key bias only shifts each score row by a constant, so its gradient
    is identically zero.
    """
    g = collab_backward(exact_expand(params), x, y, upstream)
    g_w_k = g.g_w_k_shared.copy()
    g_b_q = np.zeros_like(params.b_q)
    for i in range(params.dims.n_heads):
        s = params.head_slice(i)
        # content bias row i is W_K^(i) b_Q^(i)
        g_w_k[:, s] += np.outer(g.g_content_bias[i], params.b_q[s])
        g_b_q[s] = params.w_k[:, s].T @ g.g_content_bias[i]
    return ConcatGradients(
        g_w_q=g.g_w_q_shared,
        g_w_k=g_w_k,
        g_w_v=g.g_w_v,
        g_w_o=g.g_w_o,
        g_b_q=g_b_q,
        g_b_k=np.zeros_like(params.b_k),
    )


class ToyTask(enum.Enum):
    ATTEND_TO_MARKER = "attend-to-marker"
    COPY_FIRST_TOKEN = "copy-first-token"


class Mode(enum.Enum):
    CONCAT = "concat"
    COLLAB = "collab"


@dataclass(frozen=True)
class ToyTaskConfig:
    """Single-layer self-attention regression problem.

    Every token carries a flag in column 0 and Gaussian content elsewhere.
    ``ATTEND_TO_MARKER`` flags one token at a random position and
    ``COPY_FIRST_TOKEN`` always flags position 0; in both cases the target
    for every query is the flagged token's full row.
    """

    task: ToyTask = ToyTask.ATTEND_TO_MARKER
    t_tokens: int = 8
    d_in: int = 16
    n_heads: int = 2
    d_k_shared: int = 8
    steps: int = 500
    learning_rate: float = 1.0
    rng_seed: int = 0
    n_samples: int = 16

    def __post_init__(self):
        if not isinstance(self.task, ToyTask):
            object.__setattr__(self, "task", ToyTask(self.task))
        for name in ("t_tokens", "d_in", "n_heads", "d_k_shared", "steps", "n_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"ToyTaskConfig.{name} must be >= 1")
        if self.d_in < 2:
            raise ValueError("ToyTaskConfig.d_in must be >= 2 (flag column plus content)")
        if not self.learning_rate >= 0:
            raise ValueError("ToyTaskConfig.learning_rate must be non-negative")

    @property
    def dims(self) -> AttentionDims:
        return AttentionDims(
            d_in=self.d_in,
            d_out=self.d_in,
            n_heads=self.n_heads,
            d_k=max(1, self.d_k_shared // self.n_heads),
            d_v=max(1, self.d_in // self.n_heads),
        )


def make_toy_data(cfg: ToyTaskConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Inputs ``(n_samples, T, D_in)`` and targets of the same shape."""
    n, t, d = cfg.n_samples, cfg.t_tokens, cfg.d_in
    xs = np.zeros((n, t, d))
    xs[:, :, 1:] = rng.standard_normal((n, t, d - 1))
    if cfg.task is ToyTask.ATTEND_TO_MARKER:
        pos = rng.integers(0, t, size=n)
    else:
        pos = np.zeros(n, dtype=int)
    xs[np.arange(n), pos, 0] = 1.0
    targets = np.repeat(xs[np.arange(n), pos][:, None, :], t, axis=1)
    return xs, targets


def init_concat(dims: AttentionDims, rng: np.random.Generator) -> ConcatMHAParams:
    return ConcatMHAParams.random(dims, rng, bias_scale=0.0)


def init_collab(dims: AttentionDims, d_k_shared: int, rng: np.random.Generator) -> CollabMHAParams:
    """From-scratch collaborative init: head ``i`` owns a contiguous block of
    shared columns (a generalised blocks-of-one layout) plus small noise."""
    n = dims.n_heads
    m = np.zeros((n, d_k_shared))
    bounds = np.linspace(0, d_k_shared, n + 1).round().astype(int)
    for i in range(n):
        m[i, bounds[i] : max(bounds[i + 1], bounds[i] + 1)] = 1.0
    m += 0.01 * rng.standard_normal(m.shape)
    g = rng.standard_normal
    return CollabMHAParams(
        dims=dims,
        w_q_shared=g((dims.d_in, d_k_shared)) / np.sqrt(dims.d_in),
        w_k_shared=g((dims.d_in, d_k_shared)) / np.sqrt(dims.d_in),
        mixing=MixingMatrix(m, MixingKind.DENSE),
        content_bias=np.zeros((n, dims.d_in)),
        w_v=g((dims.d_in, dims.d_v_total)) / np.sqrt(dims.d_in),
        w_o=g((dims.d_v_total, dims.d_out)) / np.sqrt(dims.d_v_total),
    )


def _mse(out: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = out - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def toy_loss_and_grads(params, xs: np.ndarray, targets: np.ndarray, with_grads: bool = True):
    """Mean squared error over all samples, with gradients summed over samples.

    Gradients are skipped (``None``) when the loss is not finite.
    """
    concat = isinstance(params, ConcatMHAParams)
    forward = concat_mha_forward if concat else collab_mha_forward
    backward = concat_backward if concat else collab_backward
    n = xs.shape[0]
    total = 0.0
    upstreams = []
    for x, target in zip(xs, targets):
        loss, g_out = _mse(forward(params, x, x), target)
        total += loss / n
        upstreams.append(g_out / n)
    if not with_grads or not np.isfinite(total):
        return total, None
    grads = None
    for x, g_out in zip(xs, upstreams):
        g = vars(backward(params, x, x, g_out))
        if grads is None:
            grads = {k: v.copy() for k, v in g.items()}
        else:
            for k, v in g.items():
                grads[k] += v
    return total, grads


def _step(params, grads: dict[str, np.ndarray], lr: float):
    if isinstance(params, ConcatMHAParams):
        return ConcatMHAParams(
            params.dims,
            w_q=params.w_q - lr * grads["g_w_q"],
            w_k=params.w_k - lr * grads["g_w_k"],
            w_v=params.w_v - lr * grads["g_w_v"],
            w_o=params.w_o - lr * grads["g_w_o"],
            b_q=params.b_q - lr * grads["g_b_q"],
            b_k=params.b_k - lr * grads["g_b_k"],
        )
    return CollabMHAParams(
        params.dims,
        w_q_shared=params.w_q_shared - lr * grads["g_w_q_shared"],
        w_k_shared=params.w_k_shared - lr * grads["g_w_k_shared"],
        mixing=MixingMatrix(params.mixing.m - lr * grads["g_mixing"], MixingKind.DENSE),
        content_bias=params.content_bias - lr * grads["g_content_bias"],
        w_v=params.w_v - lr * grads["g_w_v"],
        w_o=params.w_o - lr * grads["g_w_o"],
    )


def initial_params(cfg: ToyTaskConfig, mode: Mode):
    """Seeded initial parameters; collab at ``D~_k = D_k`` is the exact expansion of the concat init."""
    mode = Mode(mode)
    rng = np.random.default_rng(cfg.rng_seed)
    dims = cfg.dims
    concat = init_concat(dims, rng)
    if mode is Mode.CONCAT:
        if cfg.d_k_shared != dims.d_k_total:
            raise ValueError(
                f"concat mode needs d_k_shared divisible by n_heads, got {cfg.d_k_shared}"
                f" for {cfg.n_heads} heads"
            )
        return concat
    if cfg.d_k_shared == dims.d_k_total:
        return exact_expand(concat)
    return init_collab(dims, cfg.d_k_shared, rng)


def train_toy(cfg: ToyTaskConfig, mode: Mode | str, return_params: bool = False):
    """Full-batch gradient descent on the toy task.

    Returns the loss curve with ``cfg.steps + 1`` entries: entry ``s`` is the
    loss after ``s`` updates.

    Raises
    ------
    TrainingError
        If the loss becomes NaN or infinite.
    """
    mode = Mode(mode)
    params = initial_params(cfg, mode)
    data_rng = np.random.default_rng([cfg.rng_seed, 1])
    xs, targets = make_toy_data(cfg, data_rng)

    curve = []
    for step in range(cfg.steps + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = toy_loss_and_grads(params, xs, targets, with_grads=step < cfg.steps)
        if not np.isfinite(loss):
            raise TrainingError(step)
        curve.append(loss)
        if step < cfg.steps:
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(step, "gradient is not finite")
            params = _step(params, grads, cfg.learning_rate)
    log.info("train_toy %s: loss %.4g -> %.4g", mode.value, curve[0], curve[-1])
    if return_params:
        return curve, params
    return curve
