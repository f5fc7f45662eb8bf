import numpy as np
import pytest

from armsight import autodiff as ad

RTOL = 1e-4


def fd_grad(f, x, eps=1e-4):
    """Central-difference gradient of scalar f() w.r.t. array x, mutated in place."""
    g = np.zeros_like(x)
    flat, gflat = x.ravel(), g.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        fp = f()
        flat[i] = keep - eps
        fm = f()
        flat[i] = keep
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 5, 6, 3))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0] = np.eye(3)
        out, _ = ad.conv2d_forward(x, w, np.zeros(3))
        np.testing.assert_array_equal(out, x)

    def test_ones_hand_computation(self):
        x = np.ones((1, 3, 3, 1))
        w = np.ones((2, 2, 1, 1))
        out, _ = ad.conv2d_forward(x, w, np.zeros(1))
        np.testing.assert_allclose(out, np.full((1, 2, 2, 1), 4.0))

    def test_shape_mismatch(self):
        x = np.zeros((1, 4, 4, 3))
        with pytest.raises(ad.ShapeMismatch):
            ad.conv2d_forward(x, np.zeros((3, 3, 2, 4)), np.zeros(4))
        with pytest.raises(ad.ShapeMismatch):
            ad.conv2d_forward(x, np.zeros((3, 3, 3, 4)), np.zeros(5))

    @pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)])
    def test_finite_differences(self, stride, pad, k):
        rng = np.random.default_rng(stride * 10 + pad + k)
        x = rng.normal(size=(2, 6, 7, 3))
        w = rng.normal(size=(k, k, 3, 4))
        b = rng.normal(size=4)
        r = rng.normal(size=ad.conv2d_forward(x, w, b, stride, pad)[0].shape)

        def run():
            return float((ad.conv2d_forward(x, w, b, stride, pad)[0] * r).sum())

        out, cache = ad.conv2d_forward(x, w, b, stride, pad)
        dx, dw, db = ad.conv2d_backward(r, cache)
        assert rel_err(dx, fd_grad(run, x)) < RTOL
        assert rel_err(dw, fd_grad(run, w)) < RTOL
        assert rel_err(db, fd_grad(run, b)) < RTOL

    def test_need_dx_false_matches_grads(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 5, 5, 2))
        w = rng.normal(size=(3, 3, 2, 2))
        out, cache = ad.conv2d_forward(x, w, np.zeros(2), pad=1)
        r = rng.normal(size=out.shape)
        dx, dw, db = ad.conv2d_backward(r, cache)
        dx2, dw2, db2 = ad.conv2d_backward(r, cache, need_dx=False)
        assert dx2 is None
        np.testing.assert_array_equal(dw, dw2)
        np.testing.assert_array_equal(db, db2)


class TestMaxPool:
    def test_even_case(self):
        x = np.arange(16, dtype=float).reshape(1, 4, 4, 1)
        out, _ = ad.maxpool2_forward(x)
        np.testing.assert_array_equal(out[0, :, :, 0], [[5, 7], [13, 15]])

    def test_ceil_mode_odd_dims(self):
        x = np.arange(15, dtype=float).reshape(1, 3, 5, 1)
        out, _ = ad.maxpool2_forward(x)
        assert out.shape == (1, 2, 3, 1)
        np.testing.assert_array_equal(out[0, :, :, 0], [[6, 8, 9], [11, 13, 14]])

    @pytest.mark.parametrize("hw", [(6, 8), (5, 7)])
    def test_finite_differences(self, hw):
        rng = np.random.default_rng(sum(hw))
        x = rng.normal(size=(2, *hw, 3))
        out, cache = ad.maxpool2_forward(x)
        r = rng.normal(size=out.shape)
        dx = ad.maxpool2_backward(r, cache)

        def run():
            return float((ad.maxpool2_forward(x)[0] * r).sum())

        assert rel_err(dx, fd_grad(run, x)) < RTOL


class TestPointwiseLayers:
    def test_relu_example(self):
        out, _ = ad.relu_forward(np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out, [0.0, 0.0, 2.0])

    def test_relu_fd(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 17)) + 0.05  # keep clear of the kink
        out, cache = ad.relu_forward(x)
        r = rng.normal(size=out.shape)
        dx = ad.relu_backward(r, cache)
        assert rel_err(dx, fd_grad(lambda: float((ad.relu_forward(x)[0] * r).sum()), x)) < RTOL

    def test_sigmoid_range_and_clamp(self):
        out, _ = ad.sigmoid_forward(np.array([-1000.0, 0.0, 1000.0]))
        assert out[0] == ad.SIGMOID_CLAMP
        assert out[2] == 1.0 - ad.SIGMOID_CLAMP
        assert abs(out[1] - 0.5) < 1e-15

    def test_sigmoid_fd(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 9))
        out, cache = ad.sigmoid_forward(x)
        r = rng.normal(size=out.shape)
        dx = ad.sigmoid_backward(r, cache)
        assert rel_err(dx, fd_grad(lambda: float((ad.sigmoid_forward(x)[0] * r).sum()), x)) < RTOL

    def test_softmax_uniform(self):
        p, _ = ad.softmax_forward(np.zeros((2, 4)))
        np.testing.assert_allclose(p, 0.25)

    def test_softmax_fd(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 5))
        p, cache = ad.softmax_forward(x)
        r = rng.normal(size=p.shape)
        dx = ad.softmax_backward(r, cache)
        assert rel_err(dx, fd_grad(lambda: float((ad.softmax_forward(x)[0] * r).sum()), x)) < RTOL

    def test_upsample_exact(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
        out, _ = ad.upsample2_forward(x)
        np.testing.assert_array_equal(out[0, :, :, 0],
                                      [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])

    def test_upsample_fd(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 4, 2))
        out, cache = ad.upsample2_forward(x)
        r = rng.normal(size=out.shape)
        dx = ad.upsample2_backward(r, cache)
        assert rel_err(dx, fd_grad(lambda: float((ad.upsample2_forward(x)[0] * r).sum()), x)) < RTOL

    def test_crop_fd(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 6, 6, 2))
        out, cache = ad.crop2d_forward(x, 5, 4)
        assert out.shape == (2, 5, 4, 2)
        r = rng.normal(size=out.shape)
        dx = ad.crop2d_backward(r, cache)
        assert rel_err(dx, fd_grad(lambda: float((ad.crop2d_forward(x, 5, 4)[0] * r).sum()), x)) < RTOL

    def test_fc_fd(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 7))
        w = rng.normal(size=(7, 3))
        b = rng.normal(size=3)
        out, cache = ad.fully_connected_forward(x, w, b)
        r = rng.normal(size=out.shape)
        dx, dw, db = ad.fully_connected_backward(r, cache)

        def run():
            return float((ad.fully_connected_forward(x, w, b)[0] * r).sum())

        assert rel_err(dx, fd_grad(run, x)) < RTOL
        assert rel_err(dw, fd_grad(run, w)) < RTOL
        assert rel_err(db, fd_grad(run, b)) < RTOL


class TestOptimizer:
    def test_single_step_arithmetic(self):
        p = ad.Parameter("p", np.array([1.0]))
        p.grad[:] = 0.5
        ad.sgd_step([p], lr=0.1)
        assert p.value[0] == pytest.approx(0.95, abs=1e-15)

    def test_frozen_is_bit_identical(self):
        rng = np.random.default_rng(0)
        p = ad.Parameter("p", rng.normal(size=17), trainable=False)
        before = p.value.tobytes()
        for _ in range(5):
            p.grad[:] = rng.normal(size=17)
            ad.sgd_step([p], lr=0.1)
        assert p.value.tobytes() == before

    def test_momentum_recursion(self):
        # constant grad g: v1 = g, x1 = x0 - lr g ; v2 = 0.9 g + g, x2 = x1 - lr (1.9 g)
        p = ad.Parameter("p", np.array([2.0]))
        g, lr = 0.25, 0.1
        p.grad[:] = g
        ad.sgd_step([p], lr)
        p.grad[:] = g
        ad.sgd_step([p], lr)
        expected = 2.0 - lr * g - lr * (0.9 * g + g)
        assert p.value[0] == pytest.approx(expected, abs=1e-15)


class TestLrSchedule:
    def test_endpoints(self):
        s = ad.LrSchedule(total_epochs=30)
        assert ad.lr_at(s, 0) == pytest.approx(1e-3)
        assert ad.lr_at(s, 29) == pytest.approx(1e-6, rel=1e-12)

    def test_midpoint_geometric_mean(self):
        s = ad.LrSchedule(total_epochs=31)
        assert ad.lr_at(s, 15) == pytest.approx(3.1623e-5, rel=1e-4)

    def test_single_epoch(self):
        assert ad.lr_at(ad.LrSchedule(total_epochs=1), 0) == 1e-3

    def test_monotone(self):
        s = ad.LrSchedule(total_epochs=12)
        lrs = [ad.lr_at(s, e) for e in range(12)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range(self):
        s = ad.LrSchedule(total_epochs=5)
        with pytest.raises(ad.EpochOutOfRange):
            ad.lr_at(s, 5)
        with pytest.raises(ad.EpochOutOfRange):
            ad.lr_at(s, -1)


class TestCheckpoint:
    def make_params(self, rng):
        return [
            ad.Parameter("alpha_w", rng.normal(size=(3, 4, 2, 5))),
            ad.Parameter("alpha_b", rng.normal(size=5), trainable=False),
            ad.Parameter("beta_w", rng.normal(size=(7,))),
        ]

    def test_round_trip_bit_exact(self, tmp_path):
        params = self.make_params(np.random.default_rng(0))
        path = tmp_path / "model.bin"
        ad.save_checkpoint(params, path)
        loaded = ad.load_checkpoint(path)
        assert [p.name for p in loaded] == [p.name for p in params]
        for a, b in zip(params, loaded):
            assert a.value.tobytes() == b.value.tobytes()
            assert a.value.shape == b.value.shape
            assert a.trainable == b.trainable

    def test_truncated_file(self, tmp_path):
        params = self.make_params(np.random.default_rng(1))
        path = tmp_path / "model.bin"
        ad.save_checkpoint(params, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-9])
        with pytest.raises(ad.FormatError):
            ad.load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "model.bin"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ad.FormatError):
            ad.load_checkpoint(path)

    def test_no_stale_temp_on_success(self, tmp_path):
        path = tmp_path / "model.bin"
        ad.save_checkpoint(self.make_params(np.random.default_rng(2)), path)
        assert [p.name for p in tmp_path.iterdir()] == ["model.bin"]
