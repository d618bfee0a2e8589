"""The closed-loop feature filtering iteration.

One pass unrolls the recurrence

    y[k]   = head  (*) x[k]
    x[k+1] = x[0] + feedback (*) leaky_relu(y[k])

for a configured number of iterations; the final y is what the detector
decodes. Iteration count 0 is the plain open-loop forward pass. The feedback
term is always added to the original features x[0], never to x[k].
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import spectral
from .tensor import (
    ConvFilter,
    PaddingMode,
    Tensor,
    _check_leak,
    conv2d_raw,
    leaky_relu_raw,
)

# Enforced value of ||W1||^2 ||W2||^2 after a contraction rescale.
CONTRACTION_TARGET = 0.81


@dataclass(frozen=True)
class IffConfig:
    """Hyperparameters of the feedback loop.

    iterations: number of feedback passes (0 = open-loop baseline).
    leak: leaky ReLU slope, shared by every activation in the engine.
    pad: convolution boundary handling.
    enforce_contraction: rescale the feedback filter so the spectral norm
        product satisfies the stability hypothesis (analysis runs only;
        training leaves the filters unconstrained).
    feedback_kernel: spatial extent of the feedback filter.
    """

    iterations: int = 1
    leak: float = 0.1
    pad: PaddingMode = PaddingMode.ZERO
    enforce_contraction: bool = False
    feedback_kernel: int = 1

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        _check_leak(self.leak)
        if self.feedback_kernel < 1 or self.feedback_kernel % 2 == 0:
            raise ValueError(f"feedback kernel extent must be odd, got {self.feedback_kernel}")

    def with_iterations(self, iterations: int) -> "IffConfig":
        return replace(self, iterations=iterations)


@dataclass(frozen=True)
class LoopState:
    """One (features, output) pair of the trajectory."""

    features: Tensor
    output: Tensor


@dataclass(frozen=True)
class IffTrajectory:
    """The sequence {(x[k], y[k])} for k = 0..iterations."""

    states: tuple[LoopState, ...]

    def __len__(self) -> int:
        return len(self.states)

    @property
    def final_output(self) -> Tensor:
        return self.states[-1].output


def iff_unroll_raw(
    x0: np.ndarray,
    head_w: np.ndarray,
    head_b: Optional[np.ndarray],
    fb_w: np.ndarray,
    fb_b: Optional[np.ndarray],
    iterations: int,
    leak: float,
    pad: PaddingMode,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Array-level unroll shared by the Tensor API and batched inference.

    Returns the feature maps [x0..x_M] and outputs [y0..y_M].
    """
    xs = [x0]
    ys = [conv2d_raw(x0, head_w, head_b, pad)]
    for _ in range(iterations):
        fb = conv2d_raw(leaky_relu_raw(ys[-1], leak), fb_w, fb_b, pad)
        xs.append(x0 + fb)
        ys.append(conv2d_raw(xs[-1], head_w, head_b, pad))
    return xs, ys


def iff_forward(
    x0: Tensor, head: ConvFilter, feedback: ConvFilter, cfg: IffConfig
) -> IffTrajectory:
    """Run the closed loop and return the full trajectory.

    The head maps feature channels to output channels and the feedback filter
    maps output channels back to feature channels; both are applied with the
    configured padding, reusing the same filters at every iteration.
    """
    if x0.rank != 3:
        raise ValueError(f"expected [C, H, W] features, got rank {x0.rank}")
    cin = x0.shape[0]
    if head.in_channels != cin:
        raise ValueError(
            f"head filter expects {head.in_channels} channels, features have {cin}"
        )
    if feedback.in_channels != head.out_channels or feedback.out_channels != cin:
        raise ValueError(
            f"feedback filter must map {head.out_channels} -> {cin} channels, "
            f"got {feedback.in_channels} -> {feedback.out_channels}"
        )
    head_b = None if head.bias is None else head.bias.data
    fb_b = None if feedback.bias is None else feedback.bias.data
    xs, ys = iff_unroll_raw(
        x0.data,
        head.weights.data,
        head_b,
        feedback.weights.data,
        fb_b,
        cfg.iterations,
        cfg.leak,
        cfg.pad,
    )
    states = tuple(LoopState(Tensor(x), Tensor(y)) for x, y in zip(xs, ys))
    return IffTrajectory(states=states)


def contraction_product(
    head: ConvFilter, feedback: ConvFilter, extent: tuple[int, int]
) -> float:
    """||W1||^2 * ||W2||^2 with norms on max-norm slices embedded to `extent`."""
    n1 = spectral.embedded_filter_norm(head, extent)
    n2 = spectral.embedded_filter_norm(feedback, extent)
    return (n1 * n1) * (n2 * n2)


def contraction_rescale(
    head: ConvFilter, feedback: ConvFilter, extent: tuple[int, int]
) -> ConvFilter:
    """Rescale the feedback filter into the stability regime.

    If ||W1||^2 ||W2||^2 >= 1 the feedback weights are scaled so the product
    becomes CONTRACTION_TARGET; otherwise the filter is returned unchanged.
    Norms are spectral Frobenius norms of the max-norm 2D slice zero-embedded
    to `extent` (the feature map extent the loop runs at).
    """
    n1 = spectral.embedded_filter_norm(head, extent)
    if n1 == 0.0:
        raise ValueError("head filter has zero norm; contraction is undefined")
    n2 = spectral.embedded_filter_norm(feedback, extent)
    product = (n1 * n1) * (n2 * n2)
    if product < 1.0:
        return feedback
    factor = float(np.sqrt(CONTRACTION_TARGET / product))
    return feedback.scaled(factor)
