"""CP decomposition of stacked key/query products and layer conversion.

Head ``i`` of a concatenated layer scores with the bilinear form
``W_Q^(i) W_K^(i)^T``.  Stacking these gives an ``N_h x D_in x D_in`` tensor
whose rank-``R`` CP factors ``[[M, W_Q, W_K]]`` are exactly the mixing
matrix and shared projections of a collaborative layer with ``R`` shared
dimensions.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    CollabMHAParams,
    ConcatMHAParams,
    MixingMatrix,
    fold_key_bias,
)
from .errors import ShapeError
from .linalg import DEFAULT_RCOND, as_tensor3, pinv, svd, unfold

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StackedQKTensor:
    t: np.ndarray

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.t.shape


@dataclass(frozen=True)
class CPFactors:
    """Factor matrices of ``sum_r a_r o b_r o c_r``.

    ``factor_heads`` is the mixing matrix (``N_h x R``); ``factor_q`` and
    ``factor_k`` are the shared query and key projections (``D_in x R``).
    Component weights live in ``factor_heads``; there is no separate core.
    """

    factor_heads: np.ndarray
    factor_q: np.ndarray
    factor_k: np.ndarray

    @property
    def rank(self) -> int:
        return self.factor_heads.shape[1]

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.factor_heads.shape[0], self.factor_q.shape[0], self.factor_k.shape[0])

    def reconstruct(self) -> np.ndarray:
        return np.einsum(
            "ir,jr,kr->ijk", self.factor_heads, self.factor_q, self.factor_k, optimize=True
        )


class Init(enum.Enum):
    RANDOM_UNIFORM = "random"
    HOSVD = "hosvd"


@dataclass(frozen=True)
class ALSConfig:
    rank: int
    tol: float = 1e-6
    max_iters: int = 200
    init: Init = Init.RANDOM_UNIFORM
    rng_seed: int = 0
    rcond: float = DEFAULT_RCOND
    extrapolate: bool = True

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"ALSConfig.rank must be >= 1, got {self.rank}")
        if not self.tol > 0:
            raise ValueError(f"ALSConfig.tol must be positive, got {self.tol}")
        if self.max_iters < 1:
            raise ValueError(f"ALSConfig.max_iters must be >= 1, got {self.max_iters}")
        if not isinstance(self.init, Init):
            object.__setattr__(self, "init", Init(self.init))


@dataclass
class CPResult:
    factors: CPFactors
    rel_error: float
    n_iter: int
    history: list[float] = field(default_factory=list)
    """Relative error at initialisation followed by one entry per iteration."""


def stack_qk(params: ConcatMHAParams) -> StackedQKTensor:
    d = params.dims
    t = np.empty((d.n_heads, d.d_in, d.d_in))
    for i in range(d.n_heads):
        w_q, _, w_k, _ = params.head(i)
        t[i] = w_q @ w_k.T
    return StackedQKTensor(t)


def _relative_error(t: np.ndarray, norm_t: float, f: CPFactors) -> float:
    resid = np.linalg.norm(t - f.reconstruct())
    if norm_t == 0.0:
        return 0.0 if resid == 0.0 else float("inf")
    return float(resid / norm_t)


def reconstruction_error(t, f: CPFactors) -> float:
    """``||t - [[f]]||_F / ||t||_F``.

    A zero tensor scores 0 against zero factors and ``inf`` against anything else.
    """
    arr = t.t if isinstance(t, StackedQKTensor) else as_tensor3(t)
    if arr.shape != f.shape:
        raise ShapeError(f"reconstruction_error: tensor {arr.shape} vs factors {f.shape}")
    return _relative_error(arr, float(np.linalg.norm(arr)), f)


def _normalize(f: CPFactors) -> CPFactors:
    # Unit-norm query/key columns, scale absorbed into the mixing matrix.
    nq = np.linalg.norm(f.factor_q, axis=0)
    nk = np.linalg.norm(f.factor_k, axis=0)
    sq = np.where(nq > 0, nq, 1.0)
    sk = np.where(nk > 0, nk, 1.0)
    return CPFactors(f.factor_heads * (sq * sk), f.factor_q / sq, f.factor_k / sk)


def _init_factor(t: np.ndarray, mode: int, cfg: ALSConfig, rng: np.random.Generator) -> np.ndarray:
    n = t.shape[mode]
    out = rng.uniform(-0.5, 0.5, size=(n, cfg.rank))
    if cfg.init is Init.HOSVD:
        u, s, _ = svd(unfold(t, mode))
        k = min(cfg.rank, int(np.count_nonzero(s > 0)))
        out[:, :k] = u[:, :k]
    return out


def mttkrp(t: np.ndarray, f: CPFactors, mode: int) -> np.ndarray:
    """``unfold(t, mode) @ khatri_rao(...)`` without forming the Khatri-Rao matrix."""
    a, b, c = f.factor_heads, f.factor_q, f.factor_k
    if mode == 0:
        return np.einsum("ijk,jr,kr->ir", t, b, c, optimize=True)
    if mode == 1:
        return np.einsum("ijk,ir,kr->jr", t, a, c, optimize=True)
    if mode == 2:
        return np.einsum("ijk,ir,jr->kr", t, a, b, optimize=True)
    raise ValueError(f"mttkrp: mode must be 0, 1 or 2, got {mode!r}")


def cp_als(t, cfg: ALSConfig) -> CPResult:
    """Fit a rank-``cfg.rank`` CP model by alternating least squares.

    Each sweep solves exactly for the head, query and key factors in turn
    (normal equations through a pseudo-inverse of the Hadamard product of
    Gram matrices).  With ``cfg.extrapolate`` the sweep is followed by a
    step along the change in factors, of length ``n_iter ** (1/3)``, which
    is kept only if it lowers the error.  Either way the fit error never
    increases beyond round-off.

    Iteration stops when the relative improvement of the relative error,
    ``(e_prev - e) / e_prev``, falls below ``cfg.tol``, when the error is
    exactly zero, or after ``cfg.max_iters`` sweeps.

    Parameters
    ----------
    t : (I, J, K) array_like or StackedQKTensor
    cfg : ALSConfig

    Returns
    -------
    CPResult
    """
    arr = t.t if isinstance(t, StackedQKTensor) else as_tensor3(t)
    i_dim, j_dim, k_dim = arr.shape
    r = cfg.rank
    norm_t = float(np.linalg.norm(arr))
    if norm_t == 0.0:
        zero = CPFactors(np.zeros((i_dim, r)), np.zeros((j_dim, r)), np.zeros((k_dim, r)))
        return CPResult(zero, 0.0, 0, [0.0])

    rng = np.random.default_rng(cfg.rng_seed)
    f = CPFactors(
        rng.uniform(-0.5, 0.5, size=(i_dim, r)),
        _init_factor(arr, 1, cfg, rng),
        _init_factor(arr, 2, cfg, rng),
    )
    err = _relative_error(arr, norm_t, f)
    history = [err]
    n_iter = 0
    for n_iter in range(1, cfg.max_iters + 1):
        old = f
        f = _als_sweep(arr, f, cfg.rcond)
        new_err = _relative_error(arr, norm_t, f)
        if cfg.extrapolate and n_iter > 2:
            step = n_iter ** (1.0 / 3.0)
            trial = _normalize(
                CPFactors(
                    f.factor_heads + step * (f.factor_heads - old.factor_heads),
                    f.factor_q + step * (f.factor_q - old.factor_q),
                    f.factor_k + step * (f.factor_k - old.factor_k),
                )
            )
            trial_err = _relative_error(arr, norm_t, trial)
            if trial_err < new_err:
                f, new_err = trial, trial_err

        prev, err = err, new_err
        history.append(err)
        if err == 0.0 or (prev - err) / prev < cfg.tol:
            break
    log.debug("cp_als rank=%d: rel_error=%.3e after %d iterations", r, err, n_iter)
    return CPResult(f, err, n_iter, history)


def _als_sweep(t: np.ndarray, f: CPFactors, rcond: float) -> CPFactors:
    a, b, c = f.factor_heads, f.factor_q, f.factor_k
    a = mttkrp(t, CPFactors(a, b, c), 0) @ pinv((b.T @ b) * (c.T @ c), rcond)
    b = mttkrp(t, CPFactors(a, b, c), 1) @ pinv((a.T @ a) * (c.T @ c), rcond)
    c = mttkrp(t, CPFactors(a, b, c), 2) @ pinv((a.T @ a) * (b.T @ b), rcond)
    return _normalize(CPFactors(a, b, c))


def exact_expand(params: ConcatMHAParams) -> CollabMHAParams:
    """Lossless collaborative form with ``D_k`` shared dimensions and blocks-of-one mixing."""
    d = params.dims
    return CollabMHAParams(
        dims=d,
        w_q_shared=params.w_q.copy(),
        w_k_shared=params.w_k.copy(),
        mixing=MixingMatrix.blocks_of_one(d.n_heads, d.d_k),
        content_bias=fold_key_bias(params),
        w_v=params.w_v.copy(),
        w_o=params.w_o.copy(),
    )


def expand_factors(params: ConcatMHAParams) -> CPFactors:
    c = exact_expand(params)
    return CPFactors(c.mixing.m, c.w_q_shared, c.w_k_shared)


def reparametrize(
    params: ConcatMHAParams, cfg: ALSConfig, exact: bool = False
) -> tuple[CollabMHAParams, float]:
    """Convert a concatenated layer to collaborative form with ``cfg.rank`` shared dims.

    With ``exact=True`` the CP fit is skipped and the blocks-of-one expansion
    is returned; this requires ``cfg.rank == D_k``.
    """
    d = params.dims
    if exact:
        if cfg.rank != d.d_k_total:
            raise ValueError(
                f"exact conversion needs rank == N_h * d_k = {d.d_k_total}, got {cfg.rank}"
            )
        collab = exact_expand(params)
        f = CPFactors(collab.mixing.m, collab.w_q_shared, collab.w_k_shared)
        return collab, reconstruction_error(stack_qk(params), f)

    res = cp_als(stack_qk(params), cfg)
    f = res.factors
    collab = CollabMHAParams(
        dims=d,
        w_q_shared=f.factor_q,
        w_k_shared=f.factor_k,
        mixing=MixingMatrix(f.factor_heads),
        content_bias=fold_key_bias(params),
        w_v=params.w_v.copy(),
        w_o=params.w_o.copy(),
    )
    return collab, res.rel_error
