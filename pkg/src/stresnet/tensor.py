"""Dense tensor kernels for the filter network.

Tensors are plain float64 numpy arrays laid out ``(H, W, C)``.  Every kernel
also accepts a leading batch axis, ``(N, H, W, C)``, which is how the trainer
and the CTU pipeline drive them.

Convolution is cross-correlation with zero "same" padding and odd kernels.
The reduction is a single im2col product whose inner axis runs
(in-channel, kernel row, kernel col), so a fixed input always produces the
same bits.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import PreconditionError

DTYPE = np.float64


@dataclass(frozen=True)
class ConvKernel:
    """Weights ``[out][in][row][col]`` plus one bias per output channel."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=DTYPE)
        b = np.asarray(self.bias, dtype=DTYPE).reshape(-1)
        if w.ndim != 4:
            raise PreconditionError(f"kernel weights must be rank 4, got shape {w.shape}")
        kh, kw = w.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise PreconditionError(f"kernel size must be odd, got {kh}x{kw}")
        if b.shape != (w.shape[0],):
            raise PreconditionError(
                f"bias length {b.size} does not match {w.shape[0]} output channels"
            )
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @classmethod
    def zeros(cls, out_channels, in_channels, kernel_height, kernel_width=None):
        kernel_width = kernel_height if kernel_width is None else kernel_width
        return cls(
            np.zeros((out_channels, in_channels, kernel_height, kernel_width)),
            np.zeros(out_channels),
        )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_height(self) -> int:
        return self.weights.shape[2]

    @property
    def kernel_width(self) -> int:
        return self.weights.shape[3]

    @property
    def weight_count(self) -> int:
        """Weights excluding biases: out * in * kh * kw."""
        return self.weights.size


def _as_tensor(x, name="input"):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim not in (3, 4):
        raise PreconditionError(f"{name} must be (H, W, C) or (N, H, W, C), got shape {x.shape}")
    return x


def _pad(x, kh, kw):
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


def _im2col(x, kh, kw):
    """(N*H*W, C*kh*kw) patch matrix, inner axis ordered (channel, row, col)."""
    n, h, w, c = x.shape
    if kh == 1 and kw == 1:
        return x.reshape(-1, c)
    win = sliding_window_view(_pad(x, kh, kw), (kh, kw), axis=(1, 2))
    return win.reshape(n * h * w, c * kh * kw)


def _shift_sum_forward(x, weights):
    # one product over every padded position, then add the kh*kw shifted slices;
    # cheaper than im2col when out_channels < in_channels
    out_c, in_c, kh, kw = weights.shape
    n, h, w, _ = x.shape
    p = _pad(x, kh, kw)
    hp, wp = p.shape[1:3]
    z = p.reshape(-1, in_c) @ weights.transpose(1, 2, 3, 0).reshape(in_c, -1)
    z = z.reshape(n, hp, wp, kh, kw, out_c)
    out = np.zeros((n, h, w, out_c))
    for dr in range(kh):
        for dc in range(kw):
            out += z[:, dr:dr + h, dc:dc + w, dr, dc, :]
    return out


def _correlate(x, weights):
    out_c, in_c, kh, kw = weights.shape
    if out_c < in_c and kh * kw > 1:
        return _shift_sum_forward(x, weights)
    n, h, w, _ = x.shape
    out = _im2col(x, kh, kw) @ weights.reshape(out_c, -1).T
    return out.reshape(n, h, w, out_c)


def _weight_grad(x, g, shape):
    out_c, in_c, kh, kw = shape
    n, h, w, _ = x.shape
    if out_c < in_c and kh * kw > 1:
        # scatter g into kh*kw shifted copies instead of gathering x patches
        p = _pad(x, kh, kw)
        hp, wp = p.shape[1:3]
        gs = np.zeros((n, hp, wp, kh, kw, out_c))
        for dr in range(kh):
            for dc in range(kw):
                gs[:, dr:dr + h, dc:dc + w, dr, dc, :] = g
        gw = p.reshape(-1, in_c).T @ gs.reshape(-1, kh * kw * out_c)
        return gw.reshape(in_c, kh, kw, out_c).transpose(3, 0, 1, 2)
    return (g.reshape(-1, out_c).T @ _im2col(x, kh, kw)).reshape(shape)


def conv2d_same(x, kernel: ConvKernel):
    """Zero-padded cross-correlation; output keeps the spatial size of ``x``."""
    x = _as_tensor(x)
    if x.shape[-1] != kernel.in_channels:
        raise PreconditionError(
            f"input has {x.shape[-1]} channels, kernel expects {kernel.in_channels}"
        )
    single = x.ndim == 3
    if single:
        x = x[None]
    out = _correlate(x, kernel.weights)
    out += kernel.bias
    return out[0] if single else out


def conv2d_same_backward(x, kernel: ConvKernel, upstream_grad, need_input_grad=True):
    """Gradients of ``sum(upstream_grad * conv2d_same(x, kernel))``.

    Returns ``(input_grad, weight_grad, bias_grad)``.  With
    ``need_input_grad=False`` the first element is ``None``; the trainer uses
    that for the first layer, whose input is data.
    """
    x = _as_tensor(x)
    g = _as_tensor(upstream_grad, "upstream_grad")
    if x.shape[-1] != kernel.in_channels:
        raise PreconditionError(
            f"input has {x.shape[-1]} channels, kernel expects {kernel.in_channels}"
        )
    expected = x.shape[:-1] + (kernel.out_channels,)
    if g.shape != expected:
        raise PreconditionError(f"upstream_grad shape {g.shape} != output shape {expected}")
    single = x.ndim == 3
    if single:
        x, g = x[None], g[None]

    bias_grad = g.reshape(-1, kernel.out_channels).sum(axis=0)
    weight_grad = _weight_grad(x, g, kernel.weights.shape)
    input_grad = None
    if need_input_grad:
        # correlation with the spatially flipped, channel-transposed kernel
        flipped = kernel.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        input_grad = _correlate(g, np.ascontiguousarray(flipped))
        if single:
            input_grad = input_grad[0]
    return input_grad, weight_grad, bias_grad


def relu(x):
    return np.maximum(_as_tensor(x), 0.0)


def relu_backward(x, upstream_grad):
    """Gradient through ReLU; the kink at 0 takes derivative 0."""
    x = _as_tensor(x)
    g = np.asarray(upstream_grad, dtype=DTYPE)
    if g.shape != x.shape:
        raise PreconditionError(f"upstream_grad shape {g.shape} != input shape {x.shape}")
    return np.where(x > 0, g, 0.0)


def add(a, b):
    a, b = _as_tensor(a, "a"), _as_tensor(b, "b")
    if a.shape != b.shape:
        raise PreconditionError(f"cannot add shapes {a.shape} and {b.shape}")
    return a + b


def concat_channels(a, b):
    """Stack ``b``'s channels after ``a``'s."""
    a, b = _as_tensor(a, "a"), _as_tensor(b, "b")
    if a.ndim != b.ndim or a.shape[:-1] != b.shape[:-1]:
        raise PreconditionError(f"spatial shapes differ: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=-1)
