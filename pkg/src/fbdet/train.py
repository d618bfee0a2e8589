"""Training of the detector through the unrolled feedback loop.

Each step records the full forward pass (backbone, feedback iterations,
head, loss) on a gradient tape, backpropagates exactly, and applies a
momentum SGD update. The loss is the minimal grid-head objective:
binary cross-entropy on the objectness logit at every cell, squared error
on the four box offsets at object cells (weighted 5x), and softmax
cross-entropy on the class logits at object cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .autodiff import GradTape, ModelParams, sgd_step
from .detector import (
    CELL,
    GRID,
    HEAD_CHANNELS,
    PRIOR,
    DetectorModel,
    _BACKBONE_PLAN,
    detect_batch,
)
from .feedback import IffConfig
from .scenes import CLASSES, SyntheticScene
from .tensor import PaddingMode

BOX_LOSS_WEIGHT = 5.0

# Objectness BCE weight at object cells. Roughly 2% of grid cells hold an
# object; without rebalancing the negative cells swamp the objectness signal
# and scores never clear the decode threshold.
OBJECT_CELL_WEIGHT = 16.0

# Linear learning-rate warmup; the box term is quartic in the head weights
# early on and full-rate momentum steps from a cold start can blow it up.
WARMUP_STEPS = 50

# Early stop: relative loss change below this over a 5-epoch window.
STOP_REL_CHANGE = 1e-4
STOP_WINDOW = 5


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite."""


@dataclass(frozen=True)
class SceneTargets:
    """Per-image training targets on the detection grid."""

    objectness: np.ndarray  # [1, GRID, GRID] in {0, 1}
    box_xy: np.ndarray  # [2, GRID, GRID] offsets in [0, 1)
    box_wh: np.ndarray  # [2, GRID, GRID] log-scale extents
    class_onehot: np.ndarray  # [n_classes, GRID, GRID]
    positive: np.ndarray  # [1, GRID, GRID] mask


def build_targets(scene: SyntheticScene) -> SceneTargets:
    obj = np.zeros((1, GRID, GRID))
    xy = np.zeros((2, GRID, GRID))
    wh = np.zeros((2, GRID, GRID))
    onehot = np.zeros((len(CLASSES), GRID, GRID))
    for o in scene.objects:
        x, y, w, h = o.box
        cx, cy = x + w / 2.0, y + h / 2.0
        j = min(int(cx / CELL), GRID - 1)
        i = min(int(cy / CELL), GRID - 1)
        obj[0, i, j] = 1.0
        xy[0, i, j] = cx / CELL - j
        xy[1, i, j] = cy / CELL - i
        wh[0, i, j] = np.log(w / PRIOR)
        wh[1, i, j] = np.log(h / PRIOR)
        onehot[:, i, j] = 0.0
        onehot[CLASSES.index(o.label), i, j] = 1.0
    return SceneTargets(
        objectness=obj, box_xy=xy, box_wh=wh, class_onehot=onehot, positive=obj.copy()
    )


@dataclass
class BatchTargets:
    objectness: np.ndarray
    box_xy: np.ndarray
    box_wh: np.ndarray
    class_onehot: np.ndarray
    positive: np.ndarray


def stack_targets(targets: Sequence[SceneTargets]) -> BatchTargets:
    return BatchTargets(
        objectness=np.stack([t.objectness for t in targets]),
        box_xy=np.stack([t.box_xy for t in targets]),
        box_wh=np.stack([t.box_wh for t in targets]),
        class_onehot=np.stack([t.class_onehot for t in targets]),
        positive=np.stack([t.positive for t in targets]),
    )


def build_loss_tape(
    params: ModelParams,
    images: np.ndarray,
    targets: BatchTargets,
    cfg: IffConfig,
) -> tuple[GradTape, int]:
    """Record the full forward pass and loss for one batch; returns (tape, loss id)."""
    t = GradTape()
    x = t.const(images)
    for name, _cin, _cout, _k, down in _BACKBONE_PLAN:
        w = t.param(f"backbone.{name}.weight", params[f"backbone.{name}.weight"])
        b = t.param(f"backbone.{name}.bias", params[f"backbone.{name}.bias"])
        x = t.leaky_relu(t.conv2d(x, w, b, PaddingMode.ZERO), cfg.leak)
        if down:
            x = t.downsample2(x)
    x0 = x
    head_w = t.param("head.weight", params["head.weight"])
    head_b = t.param("head.bias", params["head.bias"])
    fb_w = t.param("feedback.weight", params["feedback.weight"])
    xk = x0
    for _ in range(cfg.iterations):
        yk = t.conv2d(xk, head_w, head_b, cfg.pad)
        fb = t.conv2d(t.leaky_relu(yk, cfg.leak), fb_w, None, cfg.pad)
        xk = t.add(x0, fb)
    y = t.conv2d(xk, head_w, head_b, cfg.pad)

    obj_logit = t.slice_channels(y, 0, 1)
    xy_pred = t.sigmoid(t.slice_channels(y, 1, 3))
    wh_pred = t.slice_channels(y, 3, 5)
    cls_logit = t.slice_channels(y, 5, HEAD_CHANNELS)

    pos = t.const(targets.positive)
    obj_weight = t.const(1.0 + (OBJECT_CELL_WEIGHT - 1.0) * targets.objectness)
    loss = t.weighted_sum(
        [
            t.bce_mean(obj_logit, t.const(targets.objectness), obj_weight),
            t.masked_sq_err(xy_pred, t.const(targets.box_xy), pos),
            t.masked_sq_err(wh_pred, t.const(targets.box_wh), pos),
            t.masked_softmax_ce(cls_logit, t.const(targets.class_onehot), pos),
        ],
        [1.0, BOX_LOSS_WEIGHT, BOX_LOSS_WEIGHT, 1.0],
    )
    return t, loss


def batch_loss(
    params: ModelParams, images: np.ndarray, targets: BatchTargets, cfg: IffConfig
) -> float:
    tape, loss_id = build_loss_tape(params, images, targets, cfg)
    return float(tape.value(loss_id))


@dataclass
class TrainResult:
    model: DetectorModel
    losses: list[float] = field(default_factory=list)
    map_estimates: list[float] = field(default_factory=list)
    stopped_epoch: Optional[int] = None


LrSchedule = Union[float, Callable[[int], float]]


def _lr_at(schedule: LrSchedule, epoch: int) -> float:
    return schedule(epoch) if callable(schedule) else float(schedule)


def train(
    model: DetectorModel,
    scenes: Sequence[SyntheticScene],
    cfg: IffConfig,
    epochs: int,
    lr: LrSchedule,
    momentum: float = 0.9,
    batch_size: int = 64,
    seed: int = 0,
    eval_scenes: Optional[Sequence[SyntheticScene]] = None,
) -> TrainResult:
    """Run the training loop; returns the trained model and per-epoch curves.

    Per-epoch mAP estimates are computed on eval_scenes (default: the first
    24 training scenes). Training aborts with TrainingDiverged if the loss
    becomes non-finite, and stops early once the relative loss change over a
    5-epoch window falls below 1e-4.
    """
    if len(scenes) == 0:
        raise ValueError("training needs a nonempty scene list")
    images = np.stack([s.image for s in scenes])
    full = stack_targets([build_targets(s) for s in scenes])
    if eval_scenes is None:
        eval_scenes = scenes[: min(24, len(scenes))]
    rng = np.random.default_rng([seed, 11])
    params = model.params
    velocity: Optional[dict[str, np.ndarray]] = None
    result = TrainResult(model=model)
    from .boxes import eval_map  # local import to avoid cycle at module load

    global_step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(scenes))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(scenes), batch_size):
            idx = order[start : start + batch_size]
            batch = BatchTargets(
                objectness=full.objectness[idx],
                box_xy=full.box_xy[idx],
                box_wh=full.box_wh[idx],
                class_onehot=full.class_onehot[idx],
                positive=full.positive[idx],
            )
            # runaway weights legitimately overflow in the forward/backward
            # arithmetic; the finite check is the divergence handler
            with np.errstate(over="ignore", invalid="ignore"):
                tape, loss_id = build_loss_tape(params, images[idx], batch, cfg)
                loss = float(tape.value(loss_id))
                if not np.isfinite(loss):
                    raise TrainingDiverged(
                        f"loss became non-finite at epoch {epoch}, batch {n_batches}"
                    )
                grads = tape.backward(loss_id)
            warmup = min(1.0, (global_step + 1) / WARMUP_STEPS)
            params, velocity = sgd_step(
                params, grads, warmup * _lr_at(lr, epoch), momentum, velocity
            )
            epoch_loss += loss
            n_batches += 1
            global_step += 1
        result.losses.append(epoch_loss / n_batches)
        trained = model.with_params(params)
        with np.errstate(over="ignore", invalid="ignore"):
            dets = detect_batch(trained, [s.image for s in eval_scenes], cfg)
        result.map_estimates.append(
            eval_map(dets, [list(s.objects) for s in eval_scenes])
        )
        if _should_stop(result.losses):
            result.stopped_epoch = epoch
            break
    result.model = model.with_params(params)
    return result


def _should_stop(losses: list[float]) -> bool:
    if len(losses) < STOP_WINDOW + 1:
        return False
    past = losses[-(STOP_WINDOW + 1)]
    return abs(past - losses[-1]) / max(abs(past), 1e-12) < STOP_REL_CHANGE


def loss_curve_rows(result: TrainResult) -> list[tuple]:
    """Rows of the (epoch, loss, map_estimate) loss-curve CSV."""
    return [
        (epoch, loss, map_est)
        for epoch, (loss, map_est) in enumerate(
            zip(result.losses, result.map_estimates)
        )
    ]
