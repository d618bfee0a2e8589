"""2D discrete Fourier transform and the energy identities built on it.

The reference transform is the direct summation DFT (realized as two DFT
matrix products), which is unambiguous at desk scale. A radix-2 FFT path is
provided for power-of-two extents and must agree with the direct form.

Conventions: dft2 is unnormalized, idft2 carries the 1/(H*W) factor.
Spectral norms of filters are taken on the filter's max-norm 2D slice,
zero-embedded to the working extent with its center at the origin; that
embedding is exactly the one under which circular convolution becomes an
elementwise spectrum product.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .tensor import ConvFilter, PaddingMode, Tensor, _check_leak, conv2d, leaky_relu


class ComplexTensor:
    """Immutable rank-2 complex array (a spectrum)."""

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.complex128)
        if arr.ndim != 2:
            raise ValueError(f"complex tensor must have rank 2, got {arr.ndim}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("complex tensor contains non-finite values")
        arr = arr.copy()
        arr.flags.writeable = False
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    def __repr__(self) -> str:
        return f"ComplexTensor(shape={self.shape})"


ArrayLike2D = Union[Tensor, ComplexTensor, np.ndarray]


def _as_2d_array(x: ArrayLike2D, dtype=np.complex128) -> np.ndarray:
    if isinstance(x, (Tensor, ComplexTensor)):
        arr = x.data
    else:
        arr = np.asarray(x)
    if arr.ndim != 2:
        raise ValueError(f"expected a rank-2 array, got rank {arr.ndim}")
    return arr.astype(dtype, copy=False)


def _dft_matrix(n: int, sign: float) -> np.ndarray:
    idx = np.arange(n)
    return np.exp(sign * 2j * np.pi * np.outer(idx, idx) / n)


def dft2(x: ArrayLike2D) -> ComplexTensor:
    """Unnormalized 2D DFT: X[u,v] = sum_{m,n} x[m,n] e^{-2pi i (um/H + vn/W)}."""
    arr = _as_2d_array(x)
    h, w = arr.shape
    out = _dft_matrix(h, -1.0) @ arr @ _dft_matrix(w, -1.0)
    return ComplexTensor(out)


def idft2(spectrum: ArrayLike2D) -> ComplexTensor:
    """Inverse of dft2, including the 1/(H*W) normalization."""
    arr = _as_2d_array(spectrum)
    h, w = arr.shape
    out = _dft_matrix(h, 1.0) @ arr @ _dft_matrix(w, 1.0) / (h * w)
    return ComplexTensor(out)


def _fft1d(a: np.ndarray) -> np.ndarray:
    """Iterative radix-2 Cooley-Tukey along the last axis (power-of-two length)."""
    n = a.shape[-1]
    if n & (n - 1):
        raise ValueError(f"radix-2 FFT requires a power-of-two length, got {n}")
    # Bit-reversal permutation.
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    bits = n.bit_length() - 1
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    out = a[..., rev].astype(np.complex128)
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        out = out.reshape(*out.shape[:-1], n // size, size)
        even = out[..., :half]
        odd = out[..., half:] * twiddle
        out = np.concatenate([even + odd, even - odd], axis=-1)
        out = out.reshape(*out.shape[:-2], n)
        size *= 2
    return out


def fft2(x: ArrayLike2D) -> ComplexTensor:
    """Radix-2 FFT path; power-of-two extents only. Agrees with dft2."""
    arr = _as_2d_array(x)
    out = _fft1d(arr)
    out = _fft1d(out.T).T
    return ComplexTensor(out)


def spectral_energy(x: ArrayLike2D) -> tuple[float, float]:
    """Both sides of Parseval's identity: (sum |x|^2, sum |X|^2 / (H*W))."""
    arr = _as_2d_array(x)
    h, w = arr.shape
    spatial = float(np.sum(np.abs(arr) ** 2))
    spectrum = dft2(arr).data
    return spatial, float(np.sum(np.abs(spectrum) ** 2) / (h * w))


def spectrum_norm(x: ArrayLike2D) -> float:
    """Frobenius norm of the unnormalized spectrum of a 2D signal."""
    return float(np.linalg.norm(dft2(x).data))


@dataclass(frozen=True)
class EnergyContractionReport:
    """Spectral energy before/after the leaky nonlinearity."""

    lhs: float
    rhs: float
    holds: bool


def energy_contraction_check(x: Tensor, leak: float) -> EnergyContractionReport:
    """Check that the leaky ReLU cannot increase spectral energy.

    lhs = ||dft2(leaky_relu(x))||, rhs = ||dft2(x)||; the inequality is exact,
    the tolerance covers float roundoff only.
    """
    leak = _check_leak(leak)
    lhs = spectrum_norm(leaky_relu(x, leak).data)
    rhs = spectrum_norm(x.data)
    return EnergyContractionReport(lhs=lhs, rhs=rhs, holds=lhs <= rhs + 1e-9 * rhs)


def embed_kernel(kernel: ArrayLike2D, h: int, w: int) -> np.ndarray:
    """Zero-embed an odd-extent kernel into an HxW array, center at the origin.

    Rows/columns left of center wrap to the far edge, so circular convolution
    with the embedded signal equals the centered same-size convolution.
    """
    k = _as_2d_array(kernel, dtype=np.float64)
    kh, kw = k.shape
    if kh > h or kw > w:
        raise ValueError(f"kernel {kh}x{kw} does not fit into {h}x{w}")
    g = np.zeros((h, w), dtype=np.float64)
    g[:kh, :kw] = k
    return np.roll(g, (-(kh // 2), -(kw // 2)), axis=(0, 1))


@dataclass(frozen=True)
class ConvTheoremReport:
    """Elementwise agreement between conv-then-transform and spectrum product."""

    max_abs_diff: float
    rel_diff: float
    holds: bool


def convolution_theorem_check(x: Tensor, kernel: Tensor) -> ConvTheoremReport:
    """Verify dft2(circular_conv(x, k)) == dft2(x) * dft2(embed(k)) elementwise.

    Exact (to roundoff) under circular padding; fails under zero padding,
    which is itself a documented test case.
    """
    if x.rank != 2 or kernel.rank != 2:
        raise ValueError("convolution theorem check expects rank-2 tensors")
    h, w = x.shape
    filt = ConvFilter(Tensor(kernel.data[None, None]))
    conv = conv2d(Tensor(x.data[None]), filt, PaddingMode.CIRCULAR).data[0]
    lhs = dft2(conv).data
    rhs = dft2(x).data * dft2(embed_kernel(kernel.data, h, w)).data
    max_abs = float(np.max(np.abs(lhs - rhs))) if lhs.size else 0.0
    scale = float(np.max(np.abs(rhs))) if rhs.size else 0.0
    rel = max_abs / scale if scale > 0 else max_abs
    return ConvTheoremReport(max_abs_diff=max_abs, rel_diff=rel, holds=rel <= 1e-8)


def max_norm_slice(filt: ConvFilter) -> Tensor:
    """The (out, in) 2D kernel slice with the largest Frobenius norm.

    Ties break toward the lowest (out, in) index.
    """
    w = filt.weights.data
    norms = np.sqrt(np.sum(w * w, axis=(2, 3)))
    flat = int(np.argmax(norms))  # first max in row-major order
    o, i = divmod(flat, w.shape[1])
    return Tensor(w[o, i])


def channel_spectra(x: np.ndarray) -> np.ndarray:
    """Per-channel unnormalized spectra of a [C, H, W] array."""
    if x.ndim == 2:
        x = x[None]
    return np.stack([dft2(x[c]).data for c in range(x.shape[0])])


def stacked_norm(spectra: np.ndarray) -> float:
    """Root-sum-square Frobenius norm across a stack of spectra."""
    return float(np.linalg.norm(spectra.ravel()))


def embedded_filter_norm(filt: ConvFilter, extent: tuple[int, int]) -> float:
    """Spectral Frobenius norm of the max-norm slice embedded to `extent`."""
    h, w = extent
    return spectrum_norm(embed_kernel(max_norm_slice(filt).data, h, w))
