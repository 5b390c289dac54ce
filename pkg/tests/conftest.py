import numpy as np
import pytest

from collabattn.attention import AttentionDims, ConcatMHAParams


def random_concat(rng, n_heads=3, d_k=2, d_in=6, d_v=2, d_out=5, bias_scale=1.0):
    dims = AttentionDims(d_in=d_in, d_out=d_out, n_heads=n_heads, d_k=d_k, d_v=d_v)
    return ConcatMHAParams.random(dims, rng, bias_scale=bias_scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def shared_rank_concat(rng, r=2, n_heads=4, d_k=4, d_in=16, d_v=4, bias_scale=0.1):
    """Concat layer whose per-head products all lie in one rank-``r`` CP model.

    ``W_Q^(i) = U diag(m_i) G_i`` and ``W_K^(i) = V G_i`` with orthonormal-row
    ``G_i``, so ``W_Q^(i) W_K^(i)^T = U diag(m_i) V^T``.
    """
    dims = AttentionDims(d_in=d_in, d_out=d_in, n_heads=n_heads, d_k=d_k, d_v=d_v)
    base = ConcatMHAParams.random(dims, rng, bias_scale=bias_scale)
    u = rng.standard_normal((d_in, r))
    v = rng.standard_normal((d_in, r))
    m = rng.standard_normal((n_heads, r))
    w_q = np.empty((d_in, n_heads * d_k))
    w_k = np.empty((d_in, n_heads * d_k))
    for i in range(n_heads):
        g = np.linalg.qr(rng.standard_normal((d_k, r)))[0].T
        w_q[:, i * d_k : (i + 1) * d_k] = u @ np.diag(m[i]) @ g
        w_k[:, i * d_k : (i + 1) * d_k] = v @ g
    return ConcatMHAParams(dims, w_q, w_k, base.w_v, base.w_o, base.b_q, base.b_k)


def random_cp(rng, shape, r):
    from collabattn.decompose import CPFactors

    return CPFactors(*(rng.standard_normal((n, r)) for n in shape))


COLLAB_FIELDS = ("w_q_shared", "w_k_shared", "mixing", "content_bias", "w_v", "w_o")


def _with_field(params, name, value):
    from dataclasses import replace

    from collabattn.attention import MixingMatrix

    if name == "mixing":
        value = MixingMatrix(value)
    return replace(params, **{name: value})


def _field(params, name):
    return params.mixing.m if name == "mixing" else getattr(params, name)


def fd_gradient_error(seed, h=1e-5):
    """Worst relative error of ``collab_backward`` against central differences.

    Uses ``|a - f| / max(|a|, |f|, 1e-7)`` over every parameter entry.
    """
    from collabattn.attention import CollabMHAParams, MixingMatrix, collab_mha_forward
    from collabattn.grad import collab_backward

    rng = np.random.default_rng(seed)
    dims = AttentionDims(d_in=4, d_out=5, n_heads=2, d_k=2, d_v=3)
    r = 3
    params = CollabMHAParams(
        dims,
        w_q_shared=rng.standard_normal((4, r)),
        w_k_shared=rng.standard_normal((4, r)),
        mixing=MixingMatrix(rng.standard_normal((2, r))),
        content_bias=rng.standard_normal((2, 4)),
        w_v=rng.standard_normal((4, 6)),
        w_o=rng.standard_normal((6, 5)),
    )
    x = rng.standard_normal((3, 4))
    y = rng.standard_normal((3, 4))
    g_out = rng.standard_normal((3, 5))
    grads = collab_backward(params, x, y, g_out)

    def loss(p):
        return float(np.sum(g_out * collab_mha_forward(p, x, y)))

    worst = 0.0
    for name in COLLAB_FIELDS:
        base = _field(params, name)
        analytic = getattr(grads, "g_" + name)
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            minus = base.copy()
            plus[idx] += h
            minus[idx] -= h
            fd = (loss(_with_field(params, name, plus)) - loss(_with_field(params, name, minus))) / (2 * h)
            a = analytic[idx]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-7))
    return worst


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
