"""Key/query redundancy spectra and parameter/FLOP accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import AttentionDims, ConcatMHAParams
from .decompose import stack_qk
from .linalg import product_singular_values, svd_values, unfold


@dataclass(frozen=True)
class EnergySpectrum:
    singular_values: np.ndarray
    cumulative_energy: np.ndarray

    @classmethod
    def from_singular_values(cls, sigma) -> "EnergySpectrum":
        s = np.sort(np.abs(np.asarray(sigma, dtype=np.float64)))[::-1]
        energy = np.cumsum(s**2)
        total = energy[-1] if energy.size else 0.0
        if total > 0:
            cum = energy / total
            cum[-1] = 1.0
        else:
            cum = np.zeros_like(s)
        return cls(s, cum)

    def __len__(self) -> int:
        return len(self.singular_values)


def head_spectrum(params: ConcatMHAParams, head: int) -> EnergySpectrum:
    """Spectrum of one head's bilinear form ``W_Q^(i) W_K^(i)^T``."""
    if not 0 <= head < params.dims.n_heads:
        raise ValueError(f"head {head} out of range for {params.dims.n_heads} heads")
    w_q, _, w_k, _ = params.head(head)
    return EnergySpectrum.from_singular_values(product_singular_values(w_q, w_k))


def layer_spectrum(params: ConcatMHAParams) -> EnergySpectrum:
    """Spectrum of ``W_Q W_K^T`` for the concatenated projections, i.e. the sum over heads."""
    return EnergySpectrum.from_singular_values(product_singular_values(params.w_q, params.w_k))


def stacked_spectrum(params: ConcatMHAParams, mode: int = 1) -> EnergySpectrum:
    """Spectrum of a mode unfolding of the stacked per-head products."""
    return EnergySpectrum.from_singular_values(svd_values(unfold(stack_qk(params).t, mode)))


def shared_dim_for_energy(s: EnergySpectrum, threshold: float) -> int:
    """Smallest ``k`` whose leading ``k`` components hold ``threshold`` of the energy.

    An all-zero spectrum needs no components and returns 0.
    """
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    hits = np.nonzero(s.cumulative_energy >= threshold)[0]
    if hits.size == 0:
        return 0
    return int(hits[0]) + 1


@dataclass(frozen=True)
class CostReport:
    """Parameter and score-FLOP counts for both layer forms.

    ``compression_ratio`` is ``D_k / D~_k``: the ratio of the plain
    key/query weight counts, with the mixing matrix, biases and the
    value/output path left out.
    """

    params_concat: int
    params_collab: int
    flops_concat: int
    flops_collab: int
    compression_ratio: float
    qk_params_concat: int
    qk_params_collab: int


def _shared(dims: AttentionDims, d_k_shared: int | None) -> int:
    r = dims.d_k_total if d_k_shared is None else d_k_shared
    if r < 1:
        raise ValueError(f"d_k_shared must be >= 1, got {r}")
    return r


def param_count(dims: AttentionDims, d_k_shared: int | None = None) -> CostReport:
    """Parameter totals for one attention layer in both forms.

    Concatenated: ``W_Q, W_K`` (``2 D_in D_k``), value and output matrices,
    and the query/key biases (``2 D_k``).  Collaborative: shared projections
    and mixing matrix (``(2 D_in + N_h) D~_k``), the same value/output
    matrices, and one content bias vector per head (``N_h D_in``).
    FLOP fields are filled for ``T = 1``; use :func:`flop_count` for others.
    """
    return cost_report(dims, 1, d_k_shared)


def _flops(dims: AttentionDims, t: int, r: int) -> tuple[int, int]:
    concat = 2 * t * dims.d_in * dims.d_k_total + t * t * dims.n_heads * dims.d_k
    collab = t * (2 * dims.d_in + dims.n_heads) * r + t * t * dims.n_heads * r
    return concat, collab


def flop_count(dims: AttentionDims, t_tokens: int, d_k_shared: int | None = None) -> CostReport:
    """Score-computation FLOPs for one sequence of ``t_tokens`` tokens.

    Concatenated: ``2 T D_in D_k + T^2 N_h d_k``; collaborative:
    ``T (2 D_in + N_h) D~_k + T^2 N_h D~_k``.  Multiply by batch size as needed.
    """
    if t_tokens < 1:
        raise ValueError(f"t_tokens must be >= 1, got {t_tokens}")
    return cost_report(dims, t_tokens, d_k_shared)


def cost_report(dims: AttentionDims, t_tokens: int, d_k_shared: int | None = None) -> CostReport:
    r = _shared(dims, d_k_shared)
    vo = dims.d_in * dims.d_v_total + dims.d_v_total * dims.d_out
    qk_concat = 2 * dims.d_in * dims.d_k_total
    qk_collab = 2 * dims.d_in * r
    concat = qk_concat + vo + 2 * dims.d_k_total
    collab = (2 * dims.d_in + dims.n_heads) * r + vo + dims.n_heads * dims.d_in
    fc, fl = _flops(dims, t_tokens, r)
    return CostReport(
        params_concat=concat,
        params_collab=collab,
        flops_concat=fc,
        flops_collab=fl,
        compression_ratio=qk_concat / qk_collab,
        qk_params_concat=qk_concat,
        qk_params_collab=qk_collab,
    )


def round_sig(x: float, digits: int = 3) -> float:
    if x == 0:
        return 0.0
    return round(x, digits - 1 - int(math.floor(math.log10(abs(x)))))
