import numpy as np
import pytest

from collabattn.attention import AttentionDims, CollabMHAParams, MixingMatrix, concat_mha_forward
from collabattn.decompose import exact_expand
from collabattn.errors import ShapeError, TrainingError
from collabattn.grad import (
    Mode,
    ToyTask,
    ToyTaskConfig,
    collab_backward,
    concat_backward,
    initial_params,
    make_toy_data,
    toy_loss_and_grads,
    train_toy,
)

from conftest import fd_gradient_error, random_concat


def _collab(rng, r=3):
    dims = AttentionDims(d_in=4, d_out=5, n_heads=2, d_k=2, d_v=3)
    return CollabMHAParams(
        dims,
        w_q_shared=rng.standard_normal((4, r)),
        w_k_shared=rng.standard_normal((4, r)),
        mixing=MixingMatrix(rng.standard_normal((2, r))),
        content_bias=rng.standard_normal((2, 4)),
        w_v=rng.standard_normal((4, 6)),
        w_o=rng.standard_normal((6, 5)),
    )


class TestBackward:
    def test_zero_upstream(self, rng):
        g = collab_backward(_collab(rng), rng.standard_normal((3, 4)), rng.standard_normal((2, 4)), np.zeros((3, 5)))
        assert all(not v.any() for v in vars(g).values())

    def test_single_token(self, rng):
        g = collab_backward(_collab(rng), rng.standard_normal((1, 4)), rng.standard_normal((1, 4)),
                            rng.standard_normal((1, 5)))
        # With one key the attention weights are constant, so nothing upstream of them learns.
        assert not g.g_w_q_shared.any() and not g.g_mixing.any() and not g.g_content_bias.any()

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        assert fd_gradient_error(seed) <= 1e-4

    def test_off_path_head_is_zero(self, rng):
        p = _collab(rng)
        w_o = p.w_o.copy()
        w_o[p.value_slice(1)] = 0.0
        p = CollabMHAParams(p.dims, p.w_q_shared, p.w_k_shared, p.mixing, p.content_bias, p.w_v, w_o)
        g = collab_backward(p, rng.standard_normal((3, 4)), rng.standard_normal((4, 4)), rng.standard_normal((3, 5)))
        assert not g.g_content_bias[1].any()
        assert not g.g_mixing[1].any()
        assert g.g_content_bias[0].any()

    def test_shape_errors(self, rng):
        p = _collab(rng)
        with pytest.raises(ShapeError):
            collab_backward(p, np.ones((3, 4)), np.ones((2, 4)), np.ones((2, 5)))
        with pytest.raises(ShapeError):
            collab_backward(p, np.ones((3, 3)), np.ones((2, 4)), np.ones((3, 5)))

    def test_concat_finite_differences(self, rng):
        p = random_concat(rng, n_heads=2, d_k=2, d_in=3, d_v=2, d_out=3)
        x, y = rng.standard_normal((2, 3)), rng.standard_normal((3, 3))
        g_out = rng.standard_normal((2, 3))
        g = concat_backward(p, x, y, g_out)
        h = 1e-6
        for name in ("w_q", "w_k", "w_v", "w_o", "b_q", "b_k"):
            base = getattr(p, name)
            for idx in np.ndindex(base.shape):
                plus, minus = base.copy(), base.copy()
                plus[idx] += h
                minus[idx] -= h
                lp = np.sum(g_out * concat_mha_forward(type(p)(**{**vars(p), name: plus}), x, y))
                lm = np.sum(g_out * concat_mha_forward(type(p)(**{**vars(p), name: minus}), x, y))
                assert getattr(g, "g_" + name)[idx] == pytest.approx((lp - lm) / (2 * h), abs=1e-6)


class TestToy:
    def test_marker_data(self):
        cfg = ToyTaskConfig(n_samples=5, t_tokens=6, d_in=4)
        xs, ys = make_toy_data(cfg, np.random.default_rng(0))
        assert xs.shape == ys.shape == (5, 6, 4)
        assert np.all(xs[:, :, 0].sum(axis=1) == 1.0)
        for x, y in zip(xs, ys):
            marked = x[x[:, 0] == 1.0][0]
            np.testing.assert_array_equal(y, np.tile(marked, (6, 1)))

    def test_copy_first_data(self):
        cfg = ToyTaskConfig(task=ToyTask.COPY_FIRST_TOKEN, n_samples=3, t_tokens=4, d_in=3)
        xs, ys = make_toy_data(cfg, np.random.default_rng(0))
        np.testing.assert_array_equal(ys[:, 2], xs[:, 0])

    def test_zero_learning_rate(self):
        curve = train_toy(ToyTaskConfig(steps=5, learning_rate=0.0, n_samples=4), Mode.COLLAB)
        assert len(curve) == 6 and len(set(curve)) == 1

    def test_matched_start(self):
        cfg = ToyTaskConfig(steps=1, n_samples=4)
        a = train_toy(cfg, "concat")
        b = train_toy(cfg, "collab")
        assert abs(a[0] - b[0]) <= 1e-10

    def test_collab_init_is_expansion(self):
        cfg = ToyTaskConfig()
        concat = initial_params(cfg, Mode.CONCAT)
        collab = initial_params(cfg, Mode.COLLAB)
        np.testing.assert_array_equal(collab.mixing.m, exact_expand(concat).mixing.m)

    def test_deterministic(self):
        cfg = ToyTaskConfig(steps=20, n_samples=4, d_k_shared=6, n_heads=2)
        assert train_toy(cfg, "collab") == train_toy(cfg, "collab")

    def test_reduced_rank_trains(self):
        cfg = ToyTaskConfig(steps=100, n_samples=8, d_k_shared=3)
        curve = train_toy(cfg, "collab")
        assert curve[-1] < curve[0]

    def test_concat_needs_divisible_rank(self):
        with pytest.raises(ValueError):
            initial_params(ToyTaskConfig(d_k_shared=3), Mode.CONCAT)

    def test_divergence_reports_step(self):
        with pytest.raises(TrainingError) as info:
            train_toy(ToyTaskConfig(steps=200, learning_rate=1e4, n_samples=4), "concat")
        assert info.value.step >= 1

    def test_loss_grads_keys(self, rng):
        cfg = ToyTaskConfig(n_samples=2)
        xs, ys = make_toy_data(cfg, rng)
        _, g = toy_loss_and_grads(initial_params(cfg, Mode.COLLAB), xs, ys)
        assert set(g) == {"g_w_q_shared", "g_w_k_shared", "g_mixing", "g_content_bias", "g_w_v", "g_w_o"}

    @pytest.mark.parametrize("kw", [{"steps": 0}, {"d_in": 1}, {"learning_rate": -1.0}])
    def test_bad_config(self, kw):
        with pytest.raises(ValueError):
            ToyTaskConfig(**kw)
