import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from collabattn.errors import NumericalError, ShapeError
from collabattn.linalg import (
    _tournament_perm,
    fold,
    khatri_rao,
    matmul,
    pinv,
    product_singular_values,
    softmax_rows,
    svd,
    svd_values,
    unfold,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def matrices(max_side=6):
    shape = st.tuples(st.integers(1, max_side), st.integers(1, max_side))
    return shape.flatmap(lambda s: arrays(np.float64, s, elements=finite))


class TestMatmul:
    def test_identity(self, rng):
        a = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(matmul(np.eye(3), a), a)

    def test_hand_example(self):
        out = matmul([[1, 2], [3, 4]], [[0, 1], [1, 0]])
        np.testing.assert_array_equal(out, [[2, 1], [4, 3]])

    def test_annihilator(self, rng):
        a = rng.standard_normal((3, 4))
        assert not matmul(a, np.zeros((4, 2))).any()

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            matmul([[np.nan]], [[1.0]])

    def test_associative(self, rng):
        for _ in range(20):
            n, k, m, p = rng.integers(1, 9, size=4)
            a, b, c = (rng.standard_normal(s) for s in ((n, k), (k, m), (m, p)))
            lhs = matmul(matmul(a, b), c)
            rhs = matmul(a, matmul(b, c))
            assert np.linalg.norm(lhs - rhs) <= 1e-9 * max(np.linalg.norm(lhs), 1e-300)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_rows([[0.0, 0.0, 0.0]]), [[1 / 3] * 3], atol=1e-15)

    def test_log_weights(self):
        out = softmax_rows([np.log([1.0, 2.0, 3.0])])
        np.testing.assert_allclose(out, [[1 / 6, 2 / 6, 3 / 6]], rtol=1e-14)

    def test_large_inputs_stay_finite(self):
        out = softmax_rows([[1000.0, 0.0]])
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-300)

    @given(matrices(), arrays(np.float64, 6, elements=finite))
    def test_row_shift_invariance(self, a, c):
        shifted = a + c[: a.shape[0], None] if a.shape[0] <= 6 else a
        np.testing.assert_allclose(softmax_rows(shifted), softmax_rows(a), atol=1e-12)

    @given(matrices())
    def test_rows_sum_to_one(self, a):
        np.testing.assert_allclose(softmax_rows(a).sum(axis=1), 1.0, atol=1e-12)


class TestSVD:
    def test_diagonal(self):
        np.testing.assert_allclose(svd_values(np.diag([3.0, 2.0, 1.0])), [3, 2, 1], atol=1e-14)

    def test_rank_one(self, rng):
        u = rng.standard_normal(5)
        v = rng.standard_normal(4)
        s = svd_values(np.outer(u / np.linalg.norm(u), v / np.linalg.norm(v)))
        np.testing.assert_allclose(s, [1, 0, 0, 0], atol=1e-14)

    def test_ones(self):
        np.testing.assert_allclose(svd_values(np.ones((2, 2))), [2, 0], atol=1e-14)

    @pytest.mark.parametrize("shape", [(1, 1), (1, 5), (5, 1), (6, 6), (9, 4), (4, 9), (7, 3)])
    def test_matches_lapack(self, rng, shape):
        a = rng.standard_normal(shape)
        u, s, vt = svd(a)
        np.testing.assert_allclose(s, np.linalg.svd(a, compute_uv=False), rtol=1e-12, atol=1e-13)
        np.testing.assert_allclose(u * s @ vt, a, atol=1e-12)
        k = min(shape)
        np.testing.assert_allclose(u.T @ u, np.eye(k), atol=1e-12)
        np.testing.assert_allclose(vt @ vt.T, np.eye(k), atol=1e-12)

    def test_descending_nonnegative(self, rng):
        s = svd_values(rng.standard_normal((8, 5)) @ np.diag([1, 0, 2, 0, 3]))
        assert np.all(s >= 0)
        assert np.all(np.diff(s) <= 0)

    def test_input_not_mutated(self, rng):
        a = rng.standard_normal((3, 7))
        keep = a.copy()
        svd(a)
        np.testing.assert_array_equal(a, keep)

    def test_iteration_cap(self, rng):
        with pytest.raises(NumericalError):
            svd(rng.standard_normal((6, 6)), max_sweeps=1)

    @settings(max_examples=50, deadline=None)
    @given(matrices())
    def test_energy_equals_frobenius(self, a):
        s = svd_values(a)
        fro = np.sum(a**2)
        assert abs(np.sum(s**2) - fro) <= 1e-9 * max(fro, 1e-300)

    def test_product_values(self, rng):
        a = rng.standard_normal((7, 3))
        b = rng.standard_normal((7, 3))
        expected = np.linalg.svd(a @ b.T, compute_uv=False)
        np.testing.assert_allclose(product_singular_values(a, b), expected, atol=1e-12)


@pytest.mark.parametrize("m", range(2, 12))
def test_tournament_meets_every_pair(m):
    # Simulate the round-robin schedule and record which slots face each other.
    m_even = m + (m % 2)
    h = m_even // 2
    perm = _tournament_perm(m_even)
    order = np.arange(m_even)
    met = set()
    for _ in range(m_even - 1):
        for i in range(h):
            met.add(frozenset((order[i], order[i + h])))
        order = order[perm]
    assert met == {frozenset(p) for p in itertools.combinations(range(m_even), 2)}


class TestPinv:
    def test_identity(self):
        np.testing.assert_allclose(pinv(np.eye(4)), np.eye(4), atol=1e-15)

    def test_zero_singular_value(self):
        np.testing.assert_allclose(pinv(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]), atol=1e-15)

    def test_penrose_conditions(self, rng):
        a = rng.standard_normal((6, 3)) @ rng.standard_normal((3, 5))
        p = pinv(a)
        np.testing.assert_allclose(a @ p @ a, a, atol=1e-10)
        np.testing.assert_allclose(p @ a @ p, p, atol=1e-10)
        np.testing.assert_allclose(p, np.linalg.pinv(a), atol=1e-10)

    def test_bad_rcond(self):
        with pytest.raises(ValueError):
            pinv(np.eye(2), rcond=0.0)


class TestKhatriRao:
    def test_scalar(self):
        np.testing.assert_array_equal(khatri_rao([[1.0]], [[1.0]]), [[1.0]])

    def test_hand_example(self):
        np.testing.assert_array_equal(khatri_rao([[1], [2]], [[3], [4]]), [[3], [4], [6], [8]])

    def test_identity_columns(self):
        out = khatri_rao(np.eye(2), np.eye(2))
        np.testing.assert_array_equal(out[:, 0], np.kron([1, 0], [1, 0]))
        np.testing.assert_array_equal(out[:, 1], np.kron([0, 1], [0, 1]))

    def test_columnwise_kron(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((5, 4))
        out = khatri_rao(a, b)
        for r in range(4):
            np.testing.assert_array_equal(out[:, r], np.kron(a[:, r], b[:, r]))

    def test_column_mismatch(self):
        with pytest.raises(ShapeError):
            khatri_rao(np.ones((2, 2)), np.ones((2, 3)))


def _unfold_oracle(t, mode):
    # Kolda-Bader index map: remaining modes in increasing order, earliest varying fastest.
    others = [m for m in range(3) if m != mode]
    out = np.empty((t.shape[mode], t.size // t.shape[mode]))
    for idx in itertools.product(*(range(n) for n in t.shape)):
        j = idx[others[0]] + t.shape[others[0]] * idx[others[1]]
        out[idx[mode], j] = t[idx]
    return out


class TestUnfold:
    def test_scalar(self):
        t = np.array([[[4.5]]])
        for mode in range(3):
            np.testing.assert_array_equal(unfold(t, mode), [[4.5]])

    @pytest.mark.parametrize("mode", range(3))
    def test_brute_force_2x2x2(self, mode):
        t = np.arange(8.0).reshape(2, 2, 2)
        np.testing.assert_array_equal(unfold(t, mode), _unfold_oracle(t, mode))

    def test_mode0_rows_index_first_axis(self):
        t = np.arange(8.0).reshape(2, 2, 2)
        assert set(unfold(t, 0)[0]) == {0, 1, 2, 3}

    @pytest.mark.parametrize("mode", range(3))
    def test_brute_force_uneven(self, rng, mode):
        t = rng.standard_normal((2, 3, 4))
        np.testing.assert_array_equal(unfold(t, mode), _unfold_oracle(t, mode))

    def test_matches_khatri_rao_identity(self, rng):
        a, b, c = (rng.standard_normal((n, 3)) for n in (2, 4, 5))
        t = np.einsum("ir,jr,kr->ijk", a, b, c)
        np.testing.assert_allclose(unfold(t, 0), a @ khatri_rao(c, b).T, atol=1e-12)
        np.testing.assert_allclose(unfold(t, 1), b @ khatri_rao(c, a).T, atol=1e-12)
        np.testing.assert_allclose(unfold(t, 2), c @ khatri_rao(b, a).T, atol=1e-12)

    @given(
        st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)).flatmap(
            lambda s: arrays(np.float64, s, elements=finite)
        ),
        st.integers(0, 2),
    )
    def test_round_trip_bit_exact(self, t, mode):
        np.testing.assert_array_equal(fold(unfold(t, mode), mode, t.shape), t)

    @pytest.mark.parametrize("mode", [-1, 3, 1.5])
    def test_bad_mode(self, mode):
        with pytest.raises(ValueError):
            unfold(np.zeros((2, 2, 2)), mode)
