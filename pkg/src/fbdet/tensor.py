"""Dense tensor values and the small set of array operations the engine needs.

Everything downstream (the feedback loop, the gradient tape, the spectral
harness) is built from the four operations here: same-size 2D convolution,
leaky ReLU, Frobenius norm, and a*x + y. Values are immutable float64
arrays; every public operation validates finiteness so NaN/Inf never
propagate silently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np


class PaddingMode(Enum):
    """Boundary handling for same-size convolution.

    ZERO is the detector-path convention. CIRCULAR makes the convolution
    theorem an exact identity and is required on the spectral analysis path.
    """

    ZERO = "zero"
    CIRCULAR = "circular"


def _as_float_array(data, shape=None) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


class Tensor:
    """Immutable dense real tensor of rank 1..4, row-major storage."""

    __slots__ = ("_data",)

    def __init__(self, data, shape: Optional[Sequence[int]] = None):
        arr = _as_float_array(data, shape)
        if arr.ndim < 1 or arr.ndim > 4:
            raise ValueError(f"tensor rank must be 1..4, got {arr.ndim}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor contains non-finite values")
        arr = arr.copy()
        arr.flags.writeable = False
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        """Read-only numpy view of the values."""
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def rank(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @staticmethod
    def zeros(shape: Sequence[int]) -> "Tensor":
        return Tensor(np.zeros(tuple(shape), dtype=np.float64))

    def tolist(self):
        return self._data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._data, other._data))

    def __hash__(self):
        return hash((self.shape, self._data.tobytes()))


@dataclass(frozen=True)
class ConvFilter:
    """Convolution weights [out_channels, in_channels, kH, kW] plus optional bias.

    Kernel extents must be odd so a "same" output has a centered receptive
    field at every cell.
    """

    weights: Tensor
    bias: Optional[Tensor] = field(default=None)

    def __post_init__(self):
        if self.weights.rank != 4:
            raise ValueError(f"filter weights must have rank 4, got {self.weights.rank}")
        _, _, kh, kw = self.weights.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
        if self.bias is not None:
            if self.bias.shape != (self.weights.shape[0],):
                raise ValueError(
                    f"bias shape {self.bias.shape} does not match "
                    f"{self.weights.shape[0]} output channels"
                )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_shape(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    def scaled(self, factor: float) -> "ConvFilter":
        """New filter with weights (and bias, if any) multiplied by factor."""
        bias = None if self.bias is None else Tensor(self.bias.data * factor)
        return ConvFilter(Tensor(self.weights.data * factor), bias)


# ---------------------------------------------------------------------------
# Raw kernels on plain arrays. These accept an optional leading batch axis
# and are shared by the public Tensor API, the gradient tape, and the
# detector's batched inference path, so every surface computes the same way.
# ---------------------------------------------------------------------------


def _pad_input(x: np.ndarray, ph: int, pw: int, pad: PaddingMode) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    mode = "constant" if pad is PaddingMode.ZERO else "wrap"
    return np.pad(x, width, mode=mode)

def _im2col(x: np.ndarray, kh: int, kw: int, pad: PaddingMode) -> np.ndarray:
    """Window patches of [B, C, H, W] as [B, C*kh*kw, H*W] (unflipped).

    Assembled from kh*kw contiguous block copies, which is far cheaper than
    gathering a strided window view; 1x1 kernels are a zero-copy reshape.
    """
    b, c, h, w = x.shape
    if kh == 1 and kw == 1:
        return x.reshape(b, c, h * w)
    xp = _pad_input(x, kh // 2, kw // 2, pad)
    cols = np.empty((b, c, kh, kw, h, w), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + h, j : j + w]
    return cols.reshape(b, c * kh * kw, h * w)


def _flip_kernel(weights: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(weights[:, :, ::-1, ::-1])


def conv2d_cols(
    x: np.ndarray,
    weights: np.ndarray,
    bias: Optional[np.ndarray],
    pad: PaddingMode,
) -> tuple[np.ndarray, np.ndarray]:
    """conv2d_raw on a batched input, also returning the im2col buffer.

    The buffer lets a gradient tape compute the weight gradient without
    re-extracting windows.
    """
    cout, cin, kh, kw = weights.shape
    b, _, h, w = x.shape
    cols = _im2col(x, kh, kw, pad)
    # Flipping the (small) kernel against unflipped windows yields the true
    # convolution; the spectral identities depend on it.
    wf = _flip_kernel(weights).reshape(cout, cin * kh * kw)
    out = np.matmul(wf, cols).reshape(b, cout, h, w)
    if bias is not None:
        out += bias[:, None, None]
    return out, cols


def conv2d_raw(
    x: np.ndarray,
    weights: np.ndarray,
    bias: Optional[np.ndarray],
    pad: PaddingMode,
) -> np.ndarray:
    """Same-size true convolution (kernel flipped) of [..., Cin, H, W].

    out[..., o, m, n] = sum_{c,a,b} w[o, c, ph+a, pw+b] * x[..., c, m-a, n-b]
    with out-of-range samples taken as zero (ZERO) or wrapped (CIRCULAR).
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    out, _cols = conv2d_cols(x, weights, bias, pad)
    return out[0] if squeeze else out


def conv2d_input_grad(
    grad_out: np.ndarray, weights: np.ndarray, pad: PaddingMode
) -> np.ndarray:
    """Gradient of conv2d_raw w.r.t. its input, same layout as the input.

    The adjoint of a centered true convolution is itself a centered true
    convolution with the channel-transposed, spatially flipped kernel under
    the same padding mode.
    """
    adjoint = np.ascontiguousarray(weights.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    return conv2d_raw(grad_out, adjoint, None, pad)


def conv2d_weight_grad(
    grad_out: np.ndarray,
    x: np.ndarray,
    kernel_shape: tuple[int, int],
    pad: PaddingMode,
    cols: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Gradient of conv2d_raw w.r.t. the (unflipped) weights.

    Pass the im2col buffer from conv2d_cols to skip window re-extraction.
    """
    if grad_out.ndim == 3:
        grad_out = grad_out[None]
    if x is not None and x.ndim == 3:
        x = x[None]
    kh, kw = kernel_shape
    if cols is None:
        cols = _im2col(x, kh, kw, pad)
    b, ckk, hw = cols.shape
    cout = grad_out.shape[1]
    g = grad_out.reshape(b, cout, hw)
    grad_wf = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
    cin = ckk // (kh * kw)
    return _flip_kernel(grad_wf.reshape(cout, cin, kh, kw))


def leaky_relu_raw(x: np.ndarray, leak: float) -> np.ndarray:
    # max(x, leak*x) == leaky ReLU for leak in (0, 1).
    return np.maximum(x, leak * x)


def leaky_relu_grad_raw(x: np.ndarray, leak: float) -> np.ndarray:
    # Subgradient at the kink (x == 0) is taken as the leak slope.
    return np.where(x > 0.0, 1.0, leak)


def downsample2_raw(x: np.ndarray) -> np.ndarray:
    """Keep every second sample along the two trailing axes."""
    return np.ascontiguousarray(x[..., ::2, ::2])


def downsample2_grad_raw(grad_out: np.ndarray, in_shape: tuple[int, ...]) -> np.ndarray:
    grad = np.zeros(in_shape, dtype=np.float64)
    grad[..., ::2, ::2] = grad_out
    return grad


def _check_leak(leak: float) -> float:
    leak = float(leak)
    if not (0.0 < leak < 1.0):
        raise ValueError(f"leaky slope must lie in (0, 1), got {leak}")
    return leak


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, filt: ConvFilter, pad: PaddingMode = PaddingMode.ZERO) -> Tensor:
    """Same-size 2D convolution of a [Cin, H, W] tensor.

    Output spatial extents equal the input's; the result is linear in both
    the input and the weights.
    """
    if x.rank != 3:
        raise ValueError(f"conv2d expects a [C, H, W] tensor, got rank {x.rank}")
    cin, h, w = x.shape
    if filt.in_channels != cin:
        raise ValueError(
            f"filter expects {filt.in_channels} input channels, tensor has {cin}"
        )
    kh, kw = filt.kernel_shape
    if kh > h or kw > w:
        raise ValueError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    bias = None if filt.bias is None else filt.bias.data
    return Tensor(conv2d_raw(x.data, filt.weights.data, bias, pad))


def leaky_relu(x: Tensor, leak: float) -> Tensor:
    """Elementwise x for x > 0, leak * x otherwise, with leak in (0, 1)."""
    leak = _check_leak(leak)
    return Tensor(leaky_relu_raw(x.data, leak))


def frobenius_norm(x: Tensor) -> float:
    """sqrt of the sum of squared entries; zero only for the zero tensor."""
    return float(np.sqrt(np.sum(x.data * x.data)))


def axpy(a: float, x: Tensor, y: Tensor) -> Tensor:
    """Elementwise a*x + y for equal-shape tensors."""
    if x.shape != y.shape:
        raise ValueError(f"axpy shape mismatch: {x.shape} vs {y.shape}")
    return Tensor(float(a) * x.data + y.data)
