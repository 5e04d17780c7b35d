"""Layers with hand-written forward and backward passes.

Feature maps are laid out ``(channels, height, width, batch)``; dense
activations are ``(features, batch)``. Every weighted layer can carry a
:class:`~decorrnet.decorrelation.DecorrelationState`; its forward pass then
multiplies the raw input by the condensed matrix ``A = W R`` and the task
gradient for ``W`` is taken at the decorrelated input ``x = R z`` with ``R``
held constant.

Patch layout used by :func:`extract_patches` (and so by every conv ``R``):
rows are ordered channel-major, then kernel row, then kernel column; columns
are ordered sample-major, then output row, then output column.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .decorrelation import DecorrConfig, DecorrelationState, correlation_stats, update_decorrelation
from .tensor import ShapeError, check_finite


class StaleFuseError(RuntimeError):
    """Forward pass attempted with a condensed matrix older than W or R."""


class MissingCacheError(RuntimeError):
    """Backward pass (or decorrelation update) without a preceding forward pass."""


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(f"kernel {k} larger than padded input {size + 2 * padding}")
    return span // stride + 1


def extract_patches(x: np.ndarray, k: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Lower a ``(C, H, W, n)`` map to a ``(C*k*k, n*Ho*Wo)`` patch matrix."""
    if x.ndim != 4:
        raise ShapeError(f"expected (C, H, W, n) input, got shape {x.shape}")
    c, h, w, n = x.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    win = win[:, :ho, :wo]
    # (C, Ho, Wo, n, k, k) -> (C, k, k, n, Ho, Wo)
    return win.transpose(0, 4, 5, 3, 1, 2).reshape(c * k * k, n * ho * wo)


def fold_patches(cols: np.ndarray, input_shape, k: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Adjoint of :func:`extract_patches`: scatter-add patch columns back to a map."""
    c, h, w, n = input_shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if cols.shape != (c * k * k, n * ho * wo):
        raise ShapeError(f"patch matrix {cols.shape} does not match input shape {input_shape}")
    cols = cols.reshape(c, k, k, n, ho, wo)
    out = np.zeros((c, h + 2 * padding, w + 2 * padding, n), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += (
                cols[:, i, j].transpose(0, 2, 3, 1)
            )
    if padding:
        out = out[:, padding:-padding, padding:-padding, :]
    return out


def he_normal(rng: np.random.Generator, fan_out: int, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Layer:
    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def weighted_layers(self) -> list["LinearMap"]:
        return []


class LinearMap(Layer):
    """Shared machinery of dense and conv layers: ``f(A z + b)`` with ``A = W R``."""

    def __init__(self, w, b, activation="relu", decorr: DecorrConfig | None = None, name="layer"):
        if activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        self.w = w
        self.b = b
        self.activation = activation
        self.name = name
        self.decorr = (
            DecorrelationState.identity(w.shape[1], decorr, dtype=w.dtype, name=name) if decorr is not None else None
        )
        self.grads: dict[str, np.ndarray] = {}
        self.version = 0
        self._fused_version = -1
        self.a_cached = None
        self._z = None
        self._mask = None
        self.refuse()

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "b": self.b}

    def weighted_layers(self):
        return [self]

    def touch(self):
        """Record that W, b or R changed; the next forward needs a re-fuse."""
        self.version += 1

    def refuse(self):
        self.a_cached = self.w if self.decorr is None else self.w @ self.decorr.r
        self._fused_version = self.version

    # linear core on patch/feature columns

    def _linear_forward(self, z: np.ndarray) -> np.ndarray:
        if self._fused_version != self.version:
            raise StaleFuseError(f"{self.name}: condensed matrix is stale; call refuse() after updates")
        if z.shape[0] != self.w.shape[1]:
            raise ShapeError(f"{self.name}: expected {self.w.shape[1]} input rows, got {z.shape[0]}")
        self._z = z
        with np.errstate(over="ignore", invalid="ignore"):  # reported by check_finite below
            pre = self.a_cached @ z + self.b[:, None]
        if self.activation == "relu":
            self._mask = pre > 0
            pre = np.where(self._mask, pre, 0).astype(pre.dtype, copy=False)
        return check_finite(pre, f"{self.name} output")

    def _linear_forward_unfused(self, z: np.ndarray) -> np.ndarray:
        x = z if self.decorr is None else self.decorr.r @ z
        pre = self.w @ x + self.b[:, None]
        return np.maximum(pre, 0) if self.activation == "relu" else pre

    def _linear_backward(self, delta: np.ndarray) -> np.ndarray:
        if self._z is None:
            raise MissingCacheError(f"{self.name}: backward called before forward")
        if self.activation == "relu":
            delta = delta * self._mask
        gw = delta @ self._z.T
        if self.decorr is not None:
            # dL/dW = delta x^T with x = R z, i.e. (delta z^T) R^T
            gw = gw @ self.decorr.r.T
        self.grads = {"w": gw, "b": delta.sum(axis=1)}
        return self.a_cached.T @ delta

    def update_decorrelation(self, rng: np.random.Generator):
        if self.decorr is None:
            return
        if self._z is None:
            raise MissingCacheError(f"{self.name}: no cached input for the decorrelation update")
        self.decorr = update_decorrelation(self.decorr, self._z, rng)
        self.touch()

    def input_stats(self):
        """Correlation statistics of the decorrelated input of the last forward pass."""
        if self._z is None:
            raise MissingCacheError(f"{self.name}: no cached input")
        x = self._z if self.decorr is None else self.decorr.r @ self._z
        return correlation_stats(x)


class DenseDecorrelated(LinearMap):
    def __init__(self, d_in, d_out, activation="relu", decorr=None, rng=None, dtype=np.float32, name="dense"):
        rng = rng if rng is not None else np.random.default_rng()
        super().__init__(he_normal(rng, d_out, d_in, dtype), np.zeros(d_out, dtype), activation, decorr, name)

    def forward(self, x):
        return self._linear_forward(x)

    def forward_unfused(self, x):
        return self._linear_forward_unfused(x)

    def backward(self, grad):
        return self._linear_backward(grad)


class ConvDecorrelated(LinearMap):
    def __init__(
        self,
        in_channels,
        out_channels,
        kernel_size=3,
        stride=1,
        padding=0,
        activation="relu",
        decorr=None,
        rng=None,
        dtype=np.float32,
        name="conv",
    ):
        rng = rng if rng is not None else np.random.default_rng()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        d = kernel_size * kernel_size * in_channels
        super().__init__(he_normal(rng, out_channels, d, dtype), np.zeros(out_channels, dtype), activation, decorr, name)
        self._in_shape = None
        self._out_hw = None

    def _patches(self, x):
        if x.ndim != 4 or x.shape[0] != self.in_channels:
            raise ShapeError(f"{self.name}: expected ({self.in_channels}, H, W, n) input, got {x.shape}")
        self._in_shape = x.shape
        self._out_hw = (
            conv_output_size(x.shape[1], self.kernel_size, self.stride, self.padding),
            conv_output_size(x.shape[2], self.kernel_size, self.stride, self.padding),
        )
        return extract_patches(x, self.kernel_size, self.stride, self.padding)

    def _to_map(self, cols):
        ho, wo = self._out_hw
        n = self._in_shape[3]
        return cols.reshape(self.out_channels, n, ho, wo).transpose(0, 2, 3, 1)

    def forward(self, x):
        return self._to_map(self._linear_forward(self._patches(x)))

    def forward_unfused(self, x):
        return self._to_map(self._linear_forward_unfused(self._patches(x)))

    def backward(self, grad):
        if self._in_shape is None:
            raise MissingCacheError(f"{self.name}: backward called before forward")
        delta = grad.transpose(0, 3, 1, 2).reshape(self.out_channels, -1)
        gz = self._linear_backward(delta)
        return fold_patches(gz, self._in_shape, self.kernel_size, self.stride, self.padding)


class ResidualBlock(Layer):
    """``relu(conv2(relu(conv1(x))) + shortcut(x))``.

    The shortcut is the identity when shapes agree and a decorrelated 1x1
    convolution otherwise.
    """

    def __init__(self, in_channels, out_channels, stride=1, decorr=None, rng=None, dtype=np.float32, name="res"):
        rng = rng if rng is not None else np.random.default_rng()
        self.name = name
        self.conv1 = ConvDecorrelated(in_channels, out_channels, 3, stride, 1, "relu", decorr, rng, dtype, f"{name}.conv1")
        self.conv2 = ConvDecorrelated(out_channels, out_channels, 3, 1, 1, "identity", decorr, rng, dtype, f"{name}.conv2")
        self.projection = None
        if stride != 1 or in_channels != out_channels:
            self.projection = ConvDecorrelated(
                in_channels, out_channels, 1, stride, 0, "identity", decorr, rng, dtype, f"{name}.proj"
            )
        self._mask = None

    def weighted_layers(self):
        layers = [self.conv1, self.conv2]
        return layers + [self.projection] if self.projection is not None else layers

    def _combine(self, main, short):
        if main.shape != short.shape:
            raise ShapeError(f"{self.name}: residual path {main.shape} vs shortcut {short.shape}")
        s = main + short
        self._mask = s > 0
        return np.where(self._mask, s, 0).astype(s.dtype, copy=False)

    def forward(self, x):
        short = x if self.projection is None else self.projection.forward(x)
        return self._combine(self.conv2.forward(self.conv1.forward(x)), short)

    def forward_unfused(self, x):
        short = x if self.projection is None else self.projection.forward_unfused(x)
        main = self.conv2.forward_unfused(self.conv1.forward_unfused(x))
        return np.maximum(main + short, 0)

    def backward(self, grad):
        if self._mask is None:
            raise MissingCacheError(f"{self.name}: backward called before forward")
        g = grad * self._mask
        gx = self.conv1.backward(self.conv2.backward(g))
        return gx + (g if self.projection is None else self.projection.backward(g))


class Pool2x2(Layer):
    """2x2 max or mean pooling with stride 2 on ``(C, H, W, n)`` maps."""

    def __init__(self, mode="max"):
        if mode not in ("max", "mean"):
            raise ValueError(f"unknown pooling mode {mode!r}")
        self.mode = mode
        self._shape = None
        self._idx = None

    def forward(self, x):
        c, h, w, n = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"pooling needs even spatial size, got {h}x{w}")
        self._shape = x.shape
        blocks = x.reshape(c, h // 2, 2, w // 2, 2, n).transpose(0, 1, 3, 5, 2, 4).reshape(c, h // 2, w // 2, n, 4)
        if self.mode == "mean":
            return blocks.mean(axis=-1)
        self._idx = blocks.argmax(axis=-1)[..., None]
        return np.take_along_axis(blocks, self._idx, axis=-1)[..., 0]

    def backward(self, grad):
        if self._shape is None:
            raise MissingCacheError("pool: backward called before forward")
        c, h, w, n = self._shape
        if self.mode == "mean":
            blocks = np.repeat(grad[..., None] / 4, 4, axis=-1).astype(grad.dtype, copy=False)
        else:
            blocks = np.zeros(grad.shape + (4,), dtype=grad.dtype)
            np.put_along_axis(blocks, self._idx, grad[..., None], axis=-1)
        return blocks.reshape(c, h // 2, w // 2, n, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(c, h, w, n)


class Flatten(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(-1, x.shape[-1])

    def backward(self, grad):
        return grad.reshape(self._shape)


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def forward_unfused(self, x):
        for layer in self.layers:
            x = layer.forward_unfused(x) if hasattr(layer, "forward_unfused") else layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def weighted_layers(self):
        return [wl for layer in self.layers for wl in layer.weighted_layers()]

    def decorrelated_layers(self):
        return [wl for wl in self.weighted_layers() if wl.decorr is not None]

    def refuse(self):
        for wl in self.weighted_layers():
            wl.refuse()


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean categorical cross-entropy over columns and its gradient w.r.t. the logits."""
    k, n = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=0, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    log_p = shifted - log_norm
    cols = np.arange(n)
    loss = -log_p[labels, cols].mean()
    grad = np.exp(log_p)
    grad[labels, cols] -= 1
    return float(loss), grad / n
