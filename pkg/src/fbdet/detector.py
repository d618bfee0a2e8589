"""Desk-scale single-stage detector: tiny backbone, one-conv head, feedback loop.

Backbone: three zero-padded convolutions (1->8->16->16 channels) with 2x
decimation after the first two, taking 48x48 images to a 16-channel 12x12
feature map. The head maps those features to 7 output channels per cell
(objectness logit, 4 box offsets, 2 class logits); the feedback filter maps
the 7 output channels back to feature space. Decoding is one box per cell
against a single 16x16 prior.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import ModelParams
from .boxes import Detection, nms
from .feedback import IffConfig, iff_unroll_raw
from .tensor import (
    ConvFilter,
    PaddingMode,
    Tensor,
    conv2d_raw,
    downsample2_raw,
    leaky_relu_raw,
)

IMAGE_SIZE = 48
GRID = 12
CELL = IMAGE_SIZE // GRID
PRIOR = 16.0
N_CLASSES = 2
HEAD_CHANNELS = 1 + 4 + N_CLASSES

SCORE_THRESHOLD = 0.5
NMS_IOU = 0.5

# Maximum parameter share of the feedback filter, checked at construction.
FEEDBACK_PARAM_BUDGET = 0.02

_BACKBONE_PLAN = (
    # (name, in_channels, out_channels, kernel, downsample_after)
    ("conv1", 1, 8, 3, True),
    ("conv2", 8, 16, 3, True),
    ("conv3", 16, 16, 5, False),
)

_INIT_TAG = 7


@dataclass(frozen=True)
class DetectorModel:
    """Parameter set of the detector; immutable, swap params to update."""

    params: ModelParams
    feedback_kernel: int = 1

    def __post_init__(self):
        share = self.feedback_param_count() / self.param_count()
        if share >= FEEDBACK_PARAM_BUDGET:
            raise ValueError(
                f"feedback filter holds {share:.2%} of parameters, "
                f"budget is {FEEDBACK_PARAM_BUDGET:.0%}"
            )

    def param_count(self) -> int:
        return self.params.total_size()

    def feedback_param_count(self) -> int:
        return sum(
            self.params[name].size for name in self.params.names() if name.startswith("feedback.")
        )

    def head_filter(self) -> ConvFilter:
        return ConvFilter(
            Tensor(self.params["head.weight"]), Tensor(self.params["head.bias"])
        )

    def feedback_filter(self) -> ConvFilter:
        return ConvFilter(Tensor(self.params["feedback.weight"]))

    def with_params(self, params: ModelParams) -> "DetectorModel":
        return DetectorModel(params=params, feedback_kernel=self.feedback_kernel)

    def with_zero_feedback(self) -> "DetectorModel":
        zero = np.zeros_like(self.params["feedback.weight"])
        return self.with_params(self.params.with_updates({"feedback.weight": zero}))


def build_model(seed: int, feedback_kernel: int = 1) -> DetectorModel:
    """He-initialized backbone and head; feedback weights start at zero.

    Zero feedback makes the untrained closed loop exactly the open-loop
    baseline, so iteration-count comparisons start from identical models.
    """
    rng = np.random.default_rng([seed, _INIT_TAG])
    params: dict[str, np.ndarray] = {}
    for name, cin, cout, k, _down in _BACKBONE_PLAN:
        std = np.sqrt(2.0 / (cin * k * k))
        params[f"backbone.{name}.weight"] = rng.normal(0.0, std, (cout, cin, k, k))
        params[f"backbone.{name}.bias"] = np.zeros(cout)
    std = np.sqrt(2.0 / (16 * 3 * 3))
    params["head.weight"] = rng.normal(0.0, std, (HEAD_CHANNELS, 16, 3, 3))
    params["head.bias"] = np.zeros(HEAD_CHANNELS)
    params["feedback.weight"] = np.zeros(
        (16, HEAD_CHANNELS, feedback_kernel, feedback_kernel)
    )
    return DetectorModel(params=ModelParams(params), feedback_kernel=feedback_kernel)


def backbone_forward(model: DetectorModel, images: np.ndarray, leak: float) -> np.ndarray:
    """[B, 1, 48, 48] images -> [B, 16, 12, 12] features."""
    x = images
    p = model.params
    for name, _cin, _cout, _k, down in _BACKBONE_PLAN:
        x = conv2d_raw(
            x, p[f"backbone.{name}.weight"], p[f"backbone.{name}.bias"], PaddingMode.ZERO
        )
        x = leaky_relu_raw(x, leak)
        if down:
            x = downsample2_raw(x)
    return x


def head_outputs(model: DetectorModel, images: np.ndarray, cfg: IffConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run backbone plus feedback loop; returns (x0, x_final, y_final), batched."""
    squeeze = images.ndim == 3
    if squeeze:
        images = images[None]
    x0 = backbone_forward(model, images, cfg.leak)
    xs, ys = iff_unroll_raw(
        x0,
        model.params["head.weight"],
        model.params["head.bias"],
        model.params["feedback.weight"],
        None,
        cfg.iterations,
        cfg.leak,
        cfg.pad,
    )
    if squeeze:
        return x0[0], xs[-1][0], ys[-1][0]
    return x0, xs[-1], ys[-1]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    from .autodiff import stable_sigmoid

    return stable_sigmoid(np.asarray(x, dtype=np.float64))


def decode_grid(
    y: np.ndarray,
    score_threshold: float = SCORE_THRESHOLD,
    nms_iou: float = NMS_IOU,
) -> list[Detection]:
    """Decode one [7, GRID, GRID] head output into thresholded, NMS-ed boxes."""
    obj = _sigmoid(y[0])
    zc = y[5:]
    zc = zc - zc.max(axis=0, keepdims=True)
    ez = np.exp(zc)
    cls_prob = ez / ez.sum(axis=0, keepdims=True)
    best_class = np.argmax(cls_prob, axis=0)
    score = obj * np.take_along_axis(cls_prob, best_class[None], axis=0)[0]
    dets: list[Detection] = []
    rows, cols = np.nonzero(score > score_threshold)
    from .scenes import CLASSES

    for i, j in zip(rows, cols):
        cx = (j + _sigmoid(y[1, i, j])) * CELL
        cy = (i + _sigmoid(y[2, i, j])) * CELL
        # Offsets are clipped so a wild logit cannot overflow exp().
        w = PRIOR * np.exp(np.clip(y[3, i, j], -8.0, 8.0))
        h = PRIOR * np.exp(np.clip(y[4, i, j], -8.0, 8.0))
        dets.append(
            Detection(
                box=(float(cx - w / 2), float(cy - h / 2), float(w), float(h)),
                label=CLASSES[int(best_class[i, j])],
                score=float(score[i, j]),
            )
        )
    return nms(dets, nms_iou)


def detect(model: DetectorModel, image: np.ndarray, cfg: IffConfig) -> list[Detection]:
    """Full single-image inference: backbone, feedback loop, decode, NMS."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if arr.shape != (1, IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(f"expected a [1, {IMAGE_SIZE}, {IMAGE_SIZE}] image, got {arr.shape}")
    _x0, _xf, y = head_outputs(model, arr, cfg)
    return decode_grid(y)


def detect_batch(
    model: DetectorModel, images: Sequence[np.ndarray], cfg: IffConfig
) -> list[list[Detection]]:
    """Batched inference over a list of images; one detection list per image.

    Large lists are processed in chunks fanned out over the IFF_THREADS
    worker cap; chunk results are gathered in order, so the output is
    independent of the thread count.
    """
    from .runtime import parallel_map

    if len(images) == 0:
        return []
    arrays = [im.data if isinstance(im, Tensor) else im for im in images]
    chunks = [arrays[i : i + 64] for i in range(0, len(arrays), 64)]

    def run_chunk(chunk):
        _x0, _xf, ys = head_outputs(model, np.stack(chunk), cfg)
        return [decode_grid(ys[b]) for b in range(ys.shape[0])]

    return [dets for chunk in parallel_map(run_chunk, chunks) for dets in chunk]


@dataclass(frozen=True)
class TimingReport:
    """Mean per-image latency (seconds) for each probed iteration count."""

    latency: dict[int, float]
    ratio: Optional[float]


def timing_probe(
    model: DetectorModel,
    images: Sequence[np.ndarray],
    cfg: IffConfig,
    iteration_counts: tuple[int, ...] = (0, 1),
) -> TimingReport:
    """Per-image mean latency of detect() at each iteration count.

    Requires at least 100 images for a stable mean. The reported ratio is
    latency(1) / latency(0) when both were probed.
    """
    if len(images) < 100:
        raise ValueError(f"timing probe needs >= 100 images, got {len(images)}")
    arrays = [im.data if isinstance(im, Tensor) else np.asarray(im) for im in images]
    latency: dict[int, float] = {}
    for mi in iteration_counts:
        run_cfg = cfg.with_iterations(mi)
        for im in arrays[:5]:  # warm-up
            detect(model, im, run_cfg)
        start = time.perf_counter()
        for im in arrays:
            detect(model, im, run_cfg)
        latency[mi] = (time.perf_counter() - start) / len(arrays)
    ratio = latency[1] / latency[0] if 0 in latency and 1 in latency else None
    return TimingReport(latency=latency, ratio=ratio)
