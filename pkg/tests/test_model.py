import math

import numpy as np
import pytest

from conftest import central_differences, relative_error, small_problem
from lometab.layers import encode_ple, fit_ple, init_ensemble_linear
from lometab.model import (
    ModelConfig,
    backward,
    forward,
    init_model,
    load_checkpoint,
    member_loss,
    predict,
    save_checkpoint,
)
from lometab.numkernel import ShapeError, make_rng

VARIANTS = ["multiplicative", "additive", "rank1"]


def _ple():
    return fit_ple(np.random.default_rng(0).normal(size=(100, 3)), 8, [4])


def _batch(n=10, seed=5):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 3)), rng.integers(0, 4, size=(n, 1))


class TestConfig:
    @pytest.mark.parametrize("field,value", [("K", 0), ("r", 0), ("sigma_init", -1.0), ("p_drop", 1.0), ("L", 0)])
    def test_invalid(self, field, value):
        with pytest.raises(ValueError):
            ModelConfig(task="binary", **{field: value}).validate()

    def test_out_dim(self):
        assert ModelConfig(task="regression").out_dim == 1
        assert ModelConfig(task="binary").out_dim == 1
        assert ModelConfig(task="multiclass", n_classes=5).out_dim == 5


class TestForward:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_shape(self, variant):
        cfg = ModelConfig(task="multiclass", n_classes=3, K=4, r=2, d=16, variant=variant)
        out, cache = forward(init_model(cfg, _ple()), *_batch())
        assert out.shape == (10, 4, 3)
        assert cache is None

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_sigma_zero_members_identical(self, variant):
        cfg = ModelConfig(task="binary", K=5, r=3, d=16, sigma_init=0.0, variant=variant)
        out, _ = forward(init_model(cfg, _ple()), *_batch())
        for k in range(1, 5):
            assert np.array_equal(out[:, k], out[:, 0])

    def test_single_member_is_plain_mlp(self):
        cfg = ModelConfig(task="regression", K=1, r=2, d=8, sigma_init=0.0)
        model = init_model(cfg, _ple())
        x_num, x_cat = _batch()
        out, _ = forward(model, x_num, x_cat)
        h = encode_ple(model.ple, x_num, x_cat)
        for blk in model.blocks:
            h = np.maximum(h @ blk.params["W"].T + blk.params["bias"], 0)
        ref = h @ model.heads.params["W"][0].T + model.heads.params["bias"][0]
        np.testing.assert_allclose(out[:, 0], ref, rtol=1e-12, atol=1e-14)

    def test_adding_member_at_sigma_zero_keeps_prediction(self):
        cfg = ModelConfig(task="regression", K=3, r=2, d=8, sigma_init=0.0)
        model = init_model(cfg, _ple())
        x = _batch()
        before = predict(model, *x).mean
        bigger = init_model(ModelConfig(task="regression", K=4, r=2, d=8, sigma_init=0.0), _ple())
        for name, p, _ in bigger.parameters():
            src = dict((n, q) for n, q, _ in model.parameters())[name]
            p[...] = src if p.shape == src.shape else np.concatenate([src, src[:1]], axis=0)
        np.testing.assert_allclose(predict(bigger, *x).mean, before, rtol=1e-14, atol=0)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_member_permutation(self, variant):
        cfg = ModelConfig(task="multiclass", n_classes=3, K=4, r=2, d=8, sigma_init=0.5, variant=variant)
        model = init_model(cfg, _ple())
        x = _batch()
        out, _ = forward(model, *x)
        perm = np.array([2, 0, 3, 1])
        shuffled = model.clone()
        for blk in shuffled.blocks:
            for key in blk.params:
                if key not in ("W", "bias"):
                    blk.params[key] = blk.params[key][perm]
        for key in shuffled.heads.params:
            shuffled.heads.params[key] = shuffled.heads.params[key][perm]
        out2, _ = forward(shuffled, *x)
        np.testing.assert_allclose(out2, out[:, perm], rtol=1e-13)
        np.testing.assert_allclose(predict(shuffled, *x).mean, predict(model, *x).mean, rtol=1e-13)

    def test_predict_batches_agree(self):
        model = init_model(ModelConfig(task="binary", K=3, r=2, d=8), _ple())
        x = _batch(n=50)
        np.testing.assert_allclose(predict(model, *x, batch_size=7).mean, predict(model, *x).mean, rtol=1e-14)


class TestAdapterInit:
    def test_residual_std(self):
        # entries of A B^T are sums of r products of N(0, s^2) draws: std sqrt(r) * s^2
        p = init_ensemble_linear(make_rng(0), "multiplicative", 64, 64, 32, 16, 1.0)
        resid = np.einsum("kir,kjr->kij", p.params["A"], p.params["B"])
        assert abs(resid.std() / math.sqrt(16) - 1.0) < 0.03


class TestLoss:
    def test_regression_example(self):
        loss, _ = member_loss(np.array([[[2.0]]]), np.array([1.0]), "regression")
        assert loss == 1.0

    def test_binary_zero_logit(self):
        loss, _ = member_loss(np.zeros((1, 1, 1)), np.array([1]), "binary")
        assert loss == pytest.approx(math.log(2), rel=1e-15)

    def test_multiclass_uniform(self):
        loss, _ = member_loss(np.zeros((2, 3, 4)), np.array([0, 3]), "multiclass")
        assert loss == pytest.approx(math.log(4), rel=1e-15)

    def test_mean_over_members(self):
        o = np.array([[[1.0], [3.0]]])
        loss, _ = member_loss(o, np.array([0.0]), "regression")
        assert loss == pytest.approx((1 + 9) / 2)

    @pytest.mark.parametrize("task,C", [("regression", 1), ("binary", 1), ("multiclass", 4)])
    def test_gradient(self, task, C):
        rng = np.random.default_rng(3)
        o = rng.normal(size=(5, 3, C))
        y = rng.normal(size=5) if task == "regression" else rng.integers(0, max(C, 2), size=5)
        _, g = member_loss(o, y, task)
        fd = central_differences(lambda: member_loss(o, y, task)[0], o)
        assert relative_error(g, fd) < 1e-7

    def test_bad_shapes(self):
        with pytest.raises(ShapeError):
            member_loss(np.zeros((2, 1)), np.zeros(2), "regression")
        with pytest.raises(ValueError):
            member_loss(np.zeros((1, 1, 1)), np.array([2]), "binary")
        with pytest.raises(ValueError):
            member_loss(np.zeros((1, 1, 3)), np.array([3]), "multiclass")


class TestPredict:
    def test_average_of_member_probabilities(self):
        model = init_model(ModelConfig(task="binary", K=2, r=1, d=4, sigma_init=0.0), _ple())
        model.heads.params["W"][...] = 0.0
        model.heads.params["bias"][...] = np.array([[0.0], [math.log(3.0)]])
        pred = predict(model, *_batch(n=1))
        np.testing.assert_allclose(pred.members[:, 0, 1], [0.5, 0.75], rtol=1e-15)
        np.testing.assert_allclose(pred.mean[0], [0.375, 0.625], rtol=1e-15)

    def test_regression_shapes(self):
        pred = predict(init_model(ModelConfig(task="regression", K=3, d=4), _ple()), *_batch(n=6))
        assert pred.members.shape == (3, 6) and pred.mean.shape == (6,)


def _full_loss(model, x_num, x_cat, y):
    out, _ = forward(model, x_num, x_cat)
    return member_loss(out, y, model.config.task)[0]


class TestEndToEndGradient:
    @pytest.mark.parametrize("task", ["regression", "binary", "multiclass"])
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_finite_differences(self, task, variant):
        model, x_num, x_cat, y = small_problem(task, variant)
        out, cache = forward(model, x_num, x_cat, training=True)
        _, g = member_loss(out, y, task)
        model.zero_grad()
        backward(model, cache, g)
        for name, p, grad in model.parameters():
            fd = central_differences(lambda: _full_loss(model, x_num, x_cat, y), p)
            assert relative_error(grad, fd) <= 1e-4, name

    def test_dropout_gradient_with_fixed_mask(self):
        model, x_num, x_cat, y = small_problem("regression", "multiplicative")
        model.config.p_drop = 0.3

        def loss():
            out, _ = forward(model, x_num, x_cat, training=True, rng=make_rng(9))
            return member_loss(out, y, "regression")[0]

        out, cache = forward(model, x_num, x_cat, training=True, rng=make_rng(9))
        model.zero_grad()
        backward(model, cache, member_loss(out, y, "regression")[1])
        W = model.blocks[0].params["W"]
        assert relative_error(model.blocks[0].grads["W"], central_differences(loss, W)) <= 1e-4

    def test_backward_needs_cache(self):
        model, *_ = small_problem("binary", "rank1")
        with pytest.raises(RuntimeError):
            backward(model, None, np.zeros((1, 3, 1)))


class TestCheckpoint:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_round_trip(self, tmp_path, variant):
        model, x_num, x_cat, _ = small_problem("multiclass", variant)
        path = save_checkpoint(model, tmp_path / "m.npz")
        loaded = load_checkpoint(path)
        assert loaded.config == model.config
        for (n1, a, _), (n2, b, _) in zip(model.parameters(), loaded.parameters()):
            assert n1 == n2 and np.array_equal(a, b)
        assert np.array_equal(forward(loaded, x_num, x_cat)[0], forward(model, x_num, x_cat)[0])

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "x.npz"
        np.savez(path, __meta__=np.array('{"format": "other"}'))
        with pytest.raises(ValueError):
            load_checkpoint(path)
