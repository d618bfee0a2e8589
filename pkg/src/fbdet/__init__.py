"""Closed-loop convolutional inference engine with a spectral stability harness.

A detection head's output is fed back through a learned filter and added to
the original features, refining them over a configurable number of
iterations. The package bundles the tensor kernels, the gradient tape that
trains through the unrolled loop, a desk-scale synthetic detector to
exercise it, and the Fourier-domain analysis that checks the loop's
energy-contraction and Lyapunov-stability properties numerically.
"""

from .autodiff import GradTape, ModelParams, finite_diff_grad, sgd_step
from .boxes import Detection, eval_map, iou, nms
from .feedback import (
    CONTRACTION_TARGET,
    IffConfig,
    IffTrajectory,
    LoopState,
    contraction_rescale,
    iff_forward,
)
from .spectral import (
    ComplexTensor,
    convolution_theorem_check,
    dft2,
    embed_kernel,
    energy_contraction_check,
    fft2,
    idft2,
    max_norm_slice,
    spectral_energy,
)
from .tensor import (
    ConvFilter,
    PaddingMode,
    Tensor,
    axpy,
    conv2d,
    frobenius_norm,
    leaky_relu,
)

__version__ = "0.1.0"

__all__ = [
    "CONTRACTION_TARGET",
    "ComplexTensor",
    "ConvFilter",
    "Detection",
    "GradTape",
    "IffConfig",
    "IffTrajectory",
    "LoopState",
    "ModelParams",
    "PaddingMode",
    "Tensor",
    "axpy",
    "contraction_rescale",
    "conv2d",
    "convolution_theorem_check",
    "dft2",
    "embed_kernel",
    "energy_contraction_check",
    "eval_map",
    "fft2",
    "finite_diff_grad",
    "frobenius_norm",
    "idft2",
    "iff_forward",
    "iou",
    "leaky_relu",
    "max_norm_slice",
    "nms",
    "sgd_step",
    "spectral_energy",
    "__version__",
]
