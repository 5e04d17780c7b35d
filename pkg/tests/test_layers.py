import numpy as np
import pytest
from gradcheck import numeric_grad, rel_error

from decorrnet.decorrelation import DecorrConfig, DecorrelationState
from decorrnet.layers import (
    ConvDecorrelated,
    DenseDecorrelated,
    Flatten,
    MissingCacheError,
    Pool2x2,
    ResidualBlock,
    Sequential,
    StaleFuseError,
    extract_patches,
    fold_patches,
    softmax_cross_entropy,
)
from decorrnet.tensor import ShapeError

F64 = np.float64
CFG = DecorrConfig(kappa=0.0, epsilon=1e-3)
TOL = 1e-4


def perturb_r(layer, rng, scale=0.2):
    d = layer.decorr.d
    r = np.eye(d) + scale * rng.standard_normal((d, d)) / np.sqrt(d)
    layer.decorr = DecorrelationState(r.astype(layer.w.dtype), layer.decorr.config, layer.name)
    layer.b[:] = 0.1 * rng.standard_normal(layer.b.shape)
    layer.touch()
    layer.refuse()


def check_layer_grads(layer, x, rng):
    """Compare analytic gradients of <layer(x), g> with central differences."""
    probe = rng.standard_normal(layer.forward(x).shape)

    def f():
        for wl in layer.weighted_layers():
            wl.refuse()
        return float(np.sum(layer.forward(x) * probe))

    f()
    gx = layer.backward(probe)
    analytic = {(id(wl), k): g for wl in layer.weighted_layers() for k, g in wl.grads.items()}
    assert rel_error(gx, numeric_grad(f, x)) < TOL
    for wl in layer.weighted_layers():
        for name, p in wl.params.items():
            assert rel_error(analytic[(id(wl), name)], numeric_grad(f, p)) < TOL, (wl.name, name)


class TestPatches:
    def test_single_window(self):
        x = np.arange(9.0).reshape(1, 3, 3, 1)
        p = extract_patches(x, 3)
        assert p.shape == (9, 1)
        np.testing.assert_array_equal(p[:, 0], np.arange(9.0))

    def test_window_count(self):
        assert extract_patches(np.zeros((1, 4, 4, 1)), 3).shape == (9, 4)

    def test_patch_dim(self):
        assert extract_patches(np.zeros((8, 5, 5, 2)), 3).shape == (72, 2 * 9)

    def test_ordering(self):
        # channel-major rows; sample-major, then row-major spatial columns
        x = np.zeros((2, 3, 3, 2))
        x[1, 2, 1, 1] = 7.0
        p = extract_patches(x, 2)
        # sample 1, output (1, 0) -> column 4 + 1*2 + 0 = 6; channel 1, kernel (1, 1) -> row 4 + 2 + 1 = 7
        assert p[7, 6] == 7.0
        assert np.count_nonzero(p) == 2  # also seen by output (1, 1) at kernel (1, 0)
        assert p[6, 7] == 7.0

    def test_stride_and_padding(self):
        assert extract_patches(np.zeros((1, 5, 5, 3)), 3, stride=2, padding=1).shape == (9, 3 * 9)

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            extract_patches(np.zeros((1, 2, 2, 1)), 3)

    @pytest.mark.parametrize("k,s,p", [(3, 1, 0), (3, 2, 1), (1, 1, 0), (2, 2, 0), (5, 2, 2)])
    def test_fold_is_adjoint(self, k, s, p):
        rng = np.random.default_rng(k + s + p)
        x = rng.standard_normal((3, 7, 7, 2))
        cols = extract_patches(x, k, s, p)
        y = rng.standard_normal(cols.shape)
        lhs = np.sum(fold_patches(y, x.shape, k, s, p) * x)
        rhs = np.sum(y * cols)
        assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(rhs))


class TestDense:
    def test_identity_map(self):
        layer = DenseDecorrelated(3, 3, "identity", CFG, dtype=F64)
        layer.w[:] = np.eye(3)
        layer.touch()
        layer.refuse()
        x = np.random.default_rng(0).standard_normal((3, 5))
        np.testing.assert_array_equal(layer.forward(x), x)

    def test_fused_matches_unfused(self):
        rng = np.random.default_rng(0)
        layer = DenseDecorrelated(20, 7, "relu", CFG, rng)
        perturb_r(layer, rng)
        x = rng.standard_normal((20, 64)).astype(np.float32)
        ref = layer.forward_unfused(x)
        assert np.abs(layer.forward(x) - ref).max() <= 1e-5 * np.abs(ref).max()

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("act", ["relu", "identity"])
    def test_gradients(self, seed, act):
        rng = np.random.default_rng(seed)
        layer = DenseDecorrelated(6, 4, act, CFG, rng, F64)
        perturb_r(layer, rng)
        check_layer_grads(layer, rng.standard_normal((6, 5)), rng)

    def test_least_squares_closed_form(self):
        rng = np.random.default_rng(3)
        layer = DenseDecorrelated(4, 2, "identity", CFG, rng, F64)
        perturb_r(layer, rng)
        z = rng.standard_normal((4, 1))
        target = rng.standard_normal((2, 1))
        pred = layer.forward(z)
        layer.backward(pred - target)  # gradient of 0.5 |pred - target|^2
        x = layer.decorr.r @ z
        np.testing.assert_allclose(layer.grads["w"], (pred - target) @ x.T, rtol=1e-12)

    def test_zero_upstream(self):
        rng = np.random.default_rng(0)
        layer = DenseDecorrelated(5, 3, "relu", CFG, rng, F64)
        layer.forward(rng.standard_normal((5, 4)))
        gx = layer.backward(np.zeros((3, 4)))
        assert not gx.any() and not layer.grads["w"].any()

    def test_stale_fuse_detected(self):
        layer = DenseDecorrelated(3, 2, decorr=CFG)
        layer.touch()
        with pytest.raises(StaleFuseError):
            layer.forward(np.zeros((3, 1), np.float32))

    def test_backward_without_forward(self):
        with pytest.raises(MissingCacheError):
            DenseDecorrelated(3, 2).backward(np.zeros((2, 1)))

    def test_plain_layer_has_no_r(self):
        layer = DenseDecorrelated(3, 2)
        assert layer.decorr is None and layer.a_cached is layer.w


class TestConv:
    def test_one_by_one_identity(self):
        layer = ConvDecorrelated(3, 3, 1, activation="identity", decorr=CFG, dtype=F64)
        layer.w[:] = np.eye(3)
        layer.b[:] = [1.0, 2.0, 3.0]
        layer.touch()
        layer.refuse()
        x = np.random.default_rng(0).standard_normal((3, 4, 4, 2))
        np.testing.assert_allclose(layer.forward(x), x + layer.b[:, None, None, None], atol=1e-15)

    def test_zero_input(self):
        layer = ConvDecorrelated(2, 4, 3, padding=1, decorr=CFG)
        assert not layer.forward(np.zeros((2, 5, 5, 3), np.float32)).any()

    def test_fused_matches_unfused(self):
        rng = np.random.default_rng(1)
        layer = ConvDecorrelated(4, 6, 3, 1, 1, "relu", CFG, rng)
        perturb_r(layer, rng)
        x = rng.standard_normal((4, 8, 8, 3)).astype(np.float32)
        ref = layer.forward_unfused(x)
        assert np.abs(layer.forward(x) - ref).max() <= 1e-5 * np.abs(ref).max()

    def test_r_dimension_law(self):
        for cin, k in [(1, 1), (3, 3), (8, 3), (3, 5)]:
            assert ConvDecorrelated(cin, 2, k, decorr=CFG).decorr.r.shape == (k * k * cin,) * 2

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1)])
    def test_gradients(self, seed, stride, padding):
        rng = np.random.default_rng(seed)
        layer = ConvDecorrelated(2, 3, 3, stride, padding, "relu", CFG, rng, F64)
        perturb_r(layer, rng)
        check_layer_grads(layer, rng.standard_normal((2, 5, 5, 2)), rng)

    def test_zero_upstream(self):
        rng = np.random.default_rng(0)
        layer = ConvDecorrelated(2, 3, 3, decorr=CFG, rng=rng, dtype=F64)
        out = layer.forward(rng.standard_normal((2, 5, 5, 2)))
        gx = layer.backward(np.zeros_like(out))
        assert not gx.any() and not layer.grads["w"].any()


class TestResidual:
    def test_zero_paths(self):
        rng = np.random.default_rng(0)
        block = ResidualBlock(3, 3, decorr=CFG, rng=rng, dtype=F64)
        for wl in block.weighted_layers():
            wl.w[:] = 0
            wl.touch()
            wl.refuse()
        x = rng.standard_normal((3, 4, 4, 2))
        np.testing.assert_array_equal(block.forward(x), np.maximum(x, 0))

    def test_nonnegative_identity(self):
        block = ResidualBlock(2, 2, decorr=CFG, dtype=F64)
        block.conv2.w[:] = 0
        block.conv2.touch()
        block.conv2.refuse()
        x = np.abs(np.random.default_rng(1).standard_normal((2, 4, 4, 1)))
        np.testing.assert_array_equal(block.forward(x), x)

    def test_projection_when_shape_changes(self):
        assert ResidualBlock(2, 2).projection is None
        assert ResidualBlock(2, 4).projection.decorr is None
        block = ResidualBlock(2, 4, stride=2, decorr=CFG)
        assert block.projection.kernel_size == 1 and block.projection.decorr.d == 2
        assert block.forward(np.ones((2, 6, 6, 1), np.float32)).shape == (4, 3, 3, 1)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("cin,cout,stride", [(2, 2, 1), (2, 3, 2)])
    def test_gradients(self, seed, cin, cout, stride):
        rng = np.random.default_rng(seed)
        block = ResidualBlock(cin, cout, stride, CFG, rng, F64)
        for wl in block.weighted_layers():
            perturb_r(wl, rng)
        check_layer_grads(block, rng.standard_normal((cin, 4, 4, 2)), rng)

    def test_fused_matches_unfused(self):
        rng = np.random.default_rng(4)
        block = ResidualBlock(3, 5, 2, CFG, rng)
        for wl in block.weighted_layers():
            perturb_r(wl, rng)
        x = rng.standard_normal((3, 8, 8, 2)).astype(np.float32)
        ref = block.forward_unfused(x)
        assert np.abs(block.forward(x) - ref).max() <= 1e-5 * np.abs(ref).max()


class TestPoolFlatten:
    @pytest.mark.parametrize("mode", ["max", "mean"])
    def test_gradients(self, mode):
        rng = np.random.default_rng(0)
        pool = Pool2x2(mode)
        x = rng.standard_normal((2, 4, 6, 3))
        probe = rng.standard_normal((2, 2, 3, 3))
        f = lambda: float(np.sum(pool.forward(x) * probe))  # noqa: E731
        f()
        assert rel_error(pool.backward(probe), numeric_grad(f, x)) < TOL

    def test_values(self):
        x = np.arange(16.0).reshape(1, 4, 4, 1)
        np.testing.assert_array_equal(Pool2x2("max").forward(x)[0, :, :, 0], [[5, 7], [13, 15]])
        np.testing.assert_array_equal(Pool2x2("mean").forward(x)[0, :, :, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_odd_size(self):
        with pytest.raises(ShapeError):
            Pool2x2().forward(np.zeros((1, 3, 4, 1)))

    def test_flatten_roundtrip(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 3, 4))
        fl = Flatten()
        y = fl.forward(x)
        assert y.shape == (18, 4)
        np.testing.assert_array_equal(y[:, 1], x[..., 1].ravel())
        np.testing.assert_array_equal(fl.backward(y), x)


class TestSoftmaxCE:
    def test_uniform(self):
        loss, _ = softmax_cross_entropy(np.zeros((4, 3)), np.array([0, 1, 3]))
        assert loss == pytest.approx(np.log(4), abs=1e-12)

    def test_confident_limit(self):
        logits = np.full((3, 2), -500.0)
        logits[[1, 2], [0, 1]] = 500.0
        loss, grad = softmax_cross_entropy(logits, np.array([1, 2]))
        assert loss < 1e-12 and np.abs(grad).max() < 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        logits = 3 * rng.standard_normal((5, 4))
        labels = rng.integers(0, 5, 4)
        _, grad = softmax_cross_entropy(logits, labels)
        num = numeric_grad(lambda: softmax_cross_entropy(logits, labels)[0], logits)
        assert rel_error(grad, num) < 1e-6

    def test_label_range(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy(np.zeros((3, 2)), np.array([0, 3]))


@pytest.mark.parametrize("seed", range(5))
def test_three_layer_network_gradients(seed):
    rng = np.random.default_rng(seed)
    net = Sequential([
        ConvDecorrelated(2, 3, 3, 1, 1, "relu", CFG, rng, F64, "c0"),
        Pool2x2("max"),
        ConvDecorrelated(3, 4, 3, 1, 1, "relu", CFG, rng, F64, "c1"),
        Flatten(),
        DenseDecorrelated(4 * 2 * 2, 3, "identity", CFG, rng, F64, "d2"),
    ])
    for wl in net.weighted_layers():
        perturb_r(wl, rng)
    x = rng.standard_normal((2, 4, 4, 3))
    labels = rng.integers(0, 3, 3)

    def f():
        net.refuse()
        return softmax_cross_entropy(net.forward(x), labels)[0]

    f()
    _, g = softmax_cross_entropy(net.forward(x), labels)
    gx = net.backward(g)
    analytic = [{k: v.copy() for k, v in wl.grads.items()} for wl in net.weighted_layers()]
    assert rel_error(gx, numeric_grad(f, x)) < TOL
    for wl, grads in zip(net.weighted_layers(), analytic):
        for name, p in wl.params.items():
            assert rel_error(grads[name], numeric_grad(f, p)) < TOL, (wl.name, name)
