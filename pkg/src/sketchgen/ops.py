"""Dense (channels, height, width) tensors and the differentiable primitives.

The tensor carrier is a C-contiguous float64 numpy array of shape
(channels, height, width). Every operation is a pure function: forward
passes allocate fresh outputs, backward passes take the original inputs
plus the upstream gradient and return fresh gradient arrays, so
concurrent calls never share mutable state.

Convolution is valid (unpadded) cross-correlation only; where a network
wants size-preserving convolution it pads explicitly with `zero_pad`
first. The convolution inner loops run in the compiled Cython kernel
when it is importable; set SKETCHGEN_PURE=1 to force the numpy fallback.
`BACKEND` names the active implementation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from sketchgen import _kernels
except ImportError:
    _kernels = None

_FORCE_PURE = os.environ.get("SKETCHGEN_PURE", "0") not in ("", "0")
BACKEND = "pure" if _kernels is None or _FORCE_PURE else "compiled"


class ShapeError(ValueError):
    """A tensor shape violates an operation's contract."""


def as_tensor(data) -> np.ndarray:
    """Coerce to a C-contiguous float64 (channels, height, width) array.

    A 2-D array is treated as a single-channel image.
    """
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[np.newaxis]
    if arr.ndim != 3:
        raise ShapeError(f"expected a (channels, height, width) array, got shape {arr.shape}")
    return arr


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite values")
    return x


@dataclass(frozen=True)
class ConvLayerParams:
    """Kernel (out, in, kh, kw) and bias (out,) of one valid-convolution layer.

    Kernel spatial dims must be odd. The layer never pads; callers pad
    explicitly when they want size preservation.
    """

    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel must be 4-D (out, in, kh, kw), got shape {self.kernel.shape}")
        out_ch, _, kh, kw = self.kernel.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel spatial dims must be odd, got {kh}x{kw}")
        if self.bias.shape != (out_ch,):
            raise ShapeError(
                f"bias shape {self.bias.shape} inconsistent with kernel shape {self.kernel.shape}"
            )

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]


# ---------------------------------------------------------------------------
# convolution

def _conv2d_forward_pure(x, kernel, bias):
    kh, kw = kernel.shape[2], kernel.shape[3]
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))
    out = np.einsum("oiuv,ihwuv->ohw", kernel, windows, optimize=True)
    out += bias[:, None, None]
    return out


def _conv2d_backward_pure(x, kernel, grad_out):
    kh, kw = kernel.shape[2], kernel.shape[3]
    grad_bias = grad_out.sum(axis=(1, 2))
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))
    grad_kernel = np.einsum("ohw,ihwuv->oiuv", grad_out, windows, optimize=True)
    # grad wrt input: full correlation of grad_out with the flipped kernel
    padded = np.pad(grad_out, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    gwin = sliding_window_view(padded, (kh, kw), axis=(1, 2))
    flipped = np.ascontiguousarray(kernel[:, :, ::-1, ::-1])
    grad_x = np.einsum("oiuv,ohwuv->ihw", flipped, gwin, optimize=True)
    return grad_x, grad_kernel, grad_bias


def _check_conv_shapes(x, params):
    out_ch, in_ch, kh, kw = params.kernel.shape
    c, h, w = x.shape
    if c != in_ch:
        raise ShapeError(
            f"input shape {x.shape} has {c} channels but kernel shape "
            f"{params.kernel.shape} expects {in_ch}"
        )
    if h < kh or w < kw:
        raise ShapeError(f"input shape {x.shape} smaller than kernel shape {params.kernel.shape}")


def conv2d(x: np.ndarray, params: ConvLayerParams) -> np.ndarray:
    """Valid cross-correlation. Output spatial dims shrink by kernel-1 per axis."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    _check_conv_shapes(x, params)
    if BACKEND == "compiled":
        return _kernels.conv2d_forward(x, params.kernel, params.bias)
    return _conv2d_forward_pure(x, params.kernel, params.bias)


def conv2d_backward(x: np.ndarray, params: ConvLayerParams, grad_out: np.ndarray):
    """Gradients of conv2d w.r.t. (input, kernel, bias) for upstream grad_out."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    _check_conv_shapes(x, params)
    out_ch, _, kh, kw = params.kernel.shape
    expected = (out_ch, x.shape[1] - kh + 1, x.shape[2] - kw + 1)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match output shape {expected}")
    grad_out = np.ascontiguousarray(grad_out, dtype=np.float64)
    if BACKEND == "compiled":
        return _kernels.conv2d_backward(x, params.kernel, grad_out)
    return _conv2d_backward_pure(x, params.kernel, grad_out)


# ---------------------------------------------------------------------------
# pointwise and pooling

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, grad_out, 0.0)


def maxpool2x2(x: np.ndarray) -> np.ndarray:
    """Non-overlapping 2x2 max pooling; height and width must be even."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {x.shape}")
    win = _pool_windows(x)
    return win.max(axis=3)


def maxpool2x2_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Route gradient to the argmax of each window, first position on ties."""
    c, h, w = x.shape
    win = _pool_windows(x)
    idx = win.argmax(axis=3)
    grad_win = np.zeros_like(win)
    np.put_along_axis(grad_win, idx[..., None], grad_out[..., None], axis=3)
    return (
        grad_win.reshape(c, h // 2, w // 2, 2, 2)
        .transpose(0, 1, 3, 2, 4)
        .reshape(c, h, w)
    )


def _pool_windows(x):
    # (c, h, w) -> (c, h/2, w/2, 4); window elements in row-major (dy, dx) order
    c, h, w = x.shape
    return (
        x.reshape(c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 3, 2, 4)
        .reshape(c, h // 2, w // 2, 4)
    )


_SAME_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


def maxpool2_same(x: np.ndarray) -> np.ndarray:
    """Window-2, stride-1 max pooling, windows clipped at the border.

    Output has the same shape as the input; the last row/column windows
    degenerate to the surviving in-bounds elements.
    """
    return _same_pool_candidates(x).max(axis=3)


def maxpool2_same_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    idx = _same_pool_candidates(x).argmax(axis=3)
    acc = np.zeros((c, h + 1, w + 1))
    for k, (dy, dx) in enumerate(_SAME_POOL_OFFSETS):
        acc[:, dy:dy + h, dx:dx + w] += np.where(idx == k, grad_out, 0.0)
    return acc[:, :h, :w]


def _same_pool_candidates(x):
    c, h, w = x.shape
    p = np.pad(x, ((0, 0), (0, 1), (0, 1)), constant_values=-np.inf)
    return np.stack([p[:, dy:dy + h, dx:dx + w] for dy, dx in _SAME_POOL_OFFSETS], axis=3)


# ---------------------------------------------------------------------------
# local response normalization

def _lrn_window_sum(t: np.ndarray, n: int) -> np.ndarray:
    half = (n - 1) // 2
    c = t.shape[0]
    out = np.empty_like(t)
    for i in range(c):
        lo, hi = max(0, i - half), min(c - 1, i + half)
        out[i] = t[lo:hi + 1].sum(axis=0)
    return out


def lrn(x: np.ndarray, k: float = 2.0, n: int = 5, a: float = 1e-4, b: float = 0.75) -> np.ndarray:
    """Cross-channel response normalization x / (k + a * sum(x^2))^b.

    The sum runs over a window of n adjacent channels centered on each
    channel, clamped at the channel borders.
    """
    if n % 2 == 0 or n < 1:
        raise ValueError(f"window size must be odd and positive, got {n}")
    if k <= 0:
        raise ValueError(f"offset k must be positive, got {k}")
    den = k + a * _lrn_window_sum(x * x, n)
    return x * den ** (-b)


def lrn_backward(x: np.ndarray, grad_out: np.ndarray, k: float = 2.0, n: int = 5,
                 a: float = 1e-4, b: float = 0.75) -> np.ndarray:
    den = k + a * _lrn_window_sum(x * x, n)
    t = grad_out * x * den ** (-b - 1.0)
    return grad_out * den ** (-b) - 2.0 * a * b * x * _lrn_window_sum(t, n)


# ---------------------------------------------------------------------------
# padding, cropping, resizing

def zero_pad(x: np.ndarray, pad: int) -> np.ndarray:
    """Pad both spatial axes by `pad` zeros on each side."""
    if pad == 0:
        return x.copy()
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))


def zero_pad_backward(grad_out: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return grad_out.copy()
    return grad_out[:, pad:-pad, pad:-pad].copy()


def center_crop(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Crop the spatial center; (h - out_h) and (w - out_w) must be even."""
    c, h, w = x.shape
    if out_h > h or out_w > w:
        raise ShapeError(f"crop {out_h}x{out_w} larger than input shape {x.shape}")
    if (h - out_h) % 2 or (w - out_w) % 2:
        raise ShapeError(f"crop {out_h}x{out_w} is not centered in input shape {x.shape}")
    dy, dx = (h - out_h) // 2, (w - out_w) // 2
    return x[:, dy:dy + out_h, dx:dx + out_w].copy()


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear interpolation with corner-aligned sampling.

    Resizing to the input shape returns a bitwise-equal copy.
    """
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target size {out_h}x{out_w} must be positive")
    c, h, w = x.shape
    if out_h == h and out_w == w:
        return x.copy()
    ys = np.linspace(0.0, h - 1.0, out_h)
    xs = np.linspace(0.0, w - 1.0, out_w)
    y0 = np.clip(np.floor(ys).astype(np.intp), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(np.intp), 0, max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    top = (1.0 - fx) * x[:, y0][:, :, x0] + fx * x[:, y0][:, :, x1]
    bot = (1.0 - fx) * x[:, y1][:, :, x0] + fx * x[:, y1][:, :, x1]
    return np.ascontiguousarray((1.0 - fy) * top + fy * bot)
