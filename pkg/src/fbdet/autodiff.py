"""Minimal reverse-mode gradient tape over the engine's operation set.

The tape records each forward operation (kind, input ids, saved value);
backward() walks the records in reverse, accumulating adjoints. The op set
is exactly what the unrolled detector needs: convolution, leaky ReLU,
sigmoid, adds, channel slicing, decimation, and three scalar loss
reductions. A central finite-difference oracle cross-checks every gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .tensor import (
    PaddingMode,
    conv2d_cols,
    conv2d_input_grad,
    conv2d_raw,
    conv2d_weight_grad,
    downsample2_grad_raw,
    downsample2_raw,
    leaky_relu_grad_raw,
    leaky_relu_raw,
)


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function."""
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class ModelParams:
    """Named, uniquely keyed collection of parameter arrays.

    Shapes are fixed at construction; updates produce a new collection.
    """

    def __init__(self, items: dict[str, np.ndarray]):
        self._items: dict[str, np.ndarray] = {}
        for name, value in items.items():
            if name in self._items:
                raise ValueError(f"duplicate parameter name {name!r}")
            arr = np.asarray(value, dtype=np.float64).copy()
            arr.flags.writeable = False
            self._items[name] = arr

    def names(self) -> list[str]:
        return list(self._items)

    def get(self, name: str) -> np.ndarray:
        return self._items[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __iter__(self):
        return iter(self._items.items())

    def __len__(self) -> int:
        return len(self._items)

    def total_size(self) -> int:
        return sum(v.size for v in self._items.values())

    def with_updates(self, updates: dict[str, np.ndarray]) -> "ModelParams":
        merged = dict(self._items)
        for name, value in updates.items():
            if name not in merged:
                raise KeyError(f"unknown parameter {name!r}")
            if np.shape(value) != merged[name].shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: "
                    f"{np.shape(value)} vs {merged[name].shape}"
                )
            merged[name] = value
        return ModelParams(merged)

    def perturbed(self, name: str, flat_index: int, delta: float) -> "ModelParams":
        arr = self._items[name].copy()
        arr.flags.writeable = True
        arr.flat[flat_index] += delta
        return self.with_updates({name: arr})


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    ctx: dict = field(default_factory=dict)


class GradTape:
    """Recorded forward graph; node ids are indices in recording order."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._param_ids: dict[int, str] = {}

    # -- recording -----------------------------------------------------

    def _record(self, op: str, inputs: tuple[int, ...], value: np.ndarray, **ctx) -> int:
        self._nodes.append(_Node(op, inputs, value, ctx))
        return len(self._nodes) - 1

    def const(self, value: np.ndarray) -> int:
        """Non-differentiable leaf (inputs, targets, masks)."""
        return self._record("const", (), np.asarray(value, dtype=np.float64))

    def param(self, name: str, value: np.ndarray) -> int:
        node_id = self._record("param", (), np.asarray(value, dtype=np.float64))
        self._param_ids[node_id] = name
        return node_id

    def value(self, node_id: int) -> np.ndarray:
        return self._nodes[node_id].value

    def conv2d(self, x: int, w: int, b: Optional[int], pad: PaddingMode) -> int:
        bias = None if b is None else self._nodes[b].value
        xv = self._nodes[x].value
        squeeze = xv.ndim == 3
        out, cols = conv2d_cols(
            xv[None] if squeeze else xv, self._nodes[w].value, bias, pad
        )
        if squeeze:
            out = out[0]
        inputs = (x, w) if b is None else (x, w, b)
        return self._record("conv2d", inputs, out, pad=pad, cols=cols)

    def leaky_relu(self, x: int, leak: float) -> int:
        out = leaky_relu_raw(self._nodes[x].value, leak)
        return self._record("leaky_relu", (x,), out, leak=leak)

    def sigmoid(self, x: int) -> int:
        out = stable_sigmoid(self._nodes[x].value)
        return self._record("sigmoid", (x,), out)

    def add(self, a: int, b: int) -> int:
        out = self._nodes[a].value + self._nodes[b].value
        return self._record("add", (a, b), out)

    def axpy(self, alpha: float, x: int, y: int) -> int:
        out = alpha * self._nodes[x].value + self._nodes[y].value
        return self._record("axpy", (x, y), out, alpha=alpha)

    def downsample2(self, x: int) -> int:
        out = downsample2_raw(self._nodes[x].value)
        return self._record("downsample2", (x,), out, in_shape=self._nodes[x].value.shape)

    def slice_channels(self, x: int, start: int, stop: int) -> int:
        out = np.ascontiguousarray(self._nodes[x].value[:, start:stop])
        return self._record(
            "slice_channels", (x,), out, start=start, stop=stop,
            in_shape=self._nodes[x].value.shape,
        )

    def bce_mean(self, logits: int, targets: int, weight: Optional[int] = None) -> int:
        """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets.

        An optional per-element weight rebalances rare positives; the mean is
        always over the element count.
        """
        z = self._nodes[logits].value
        t = self._nodes[targets].value
        with np.errstate(over="ignore", invalid="ignore"):
            loss = np.logaddexp(0.0, z) - z * t
            if weight is not None:
                loss = self._nodes[weight].value * loss
            loss = np.array(loss.mean())
        inputs = (logits, targets) if weight is None else (logits, targets, weight)
        return self._record("bce_mean", inputs, loss)

    def masked_sq_err(self, pred: int, target: int, mask: int) -> int:
        """Squared error summed over channels, averaged over mask-positive cells.

        mask broadcasts over the channel axis; a mask with no positive cells
        yields zero loss. Overflow to inf under runaway weights is expected
        and handled by the training loop's divergence check.
        """
        p = self._nodes[pred].value
        t = self._nodes[target].value
        m = self._nodes[mask].value
        count = max(float(m.sum()), 1.0)
        with np.errstate(over="ignore", invalid="ignore"):
            loss = float(np.sum(m * (p - t) ** 2) / count)
        return self._record(
            "masked_sq_err", (pred, target, mask), np.array(loss), count=count
        )

    def masked_softmax_ce(self, logits: int, onehot: int, mask: int) -> int:
        """Softmax cross-entropy over the channel axis at mask-positive cells."""
        z = self._nodes[logits].value
        t = self._nodes[onehot].value
        m = self._nodes[mask].value
        count = max(float(m.sum()), 1.0)
        with np.errstate(over="ignore", invalid="ignore"):
            zmax = z.max(axis=1, keepdims=True)
            lse = zmax + np.log(np.sum(np.exp(z - zmax), axis=1, keepdims=True))
            ce = np.sum(t * (lse - z), axis=1, keepdims=True)
            loss = float(np.sum(m * ce) / count)
        return self._record(
            "masked_softmax_ce", (logits, onehot, mask), np.array(loss), count=count
        )

    def weighted_sum(self, terms: list[int], weights: list[float]) -> int:
        vals = [float(self._nodes[i].value) for i in terms]
        out = np.array(sum(w * v for w, v in zip(weights, vals)))
        return self._record("weighted_sum", tuple(terms), out, weights=tuple(weights))

    # -- backward ------------------------------------------------------

    def backward(self, loss_id: int) -> dict[str, np.ndarray]:
        """Adjoints of the scalar at loss_id w.r.t. every recorded parameter."""
        loss = self._nodes[loss_id].value
        if loss.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        # Only nodes on a path from a parameter need adjoints; skipping the
        # rest avoids e.g. the (large, useless) input gradient of the first
        # convolution applied to constant images.
        needs = [False] * len(self._nodes)
        for nid in self._param_ids:
            needs[nid] = True
        for i, node in enumerate(self._nodes):
            if not needs[i] and any(needs[j] for j in node.inputs):
                needs[i] = True
        adjoints: dict[int, np.ndarray] = {loss_id: np.ones_like(loss)}
        param_grads: dict[str, np.ndarray] = {}
        for node_id in range(loss_id, -1, -1):
            g = adjoints.pop(node_id, None)
            if g is None:
                continue
            node = self._nodes[node_id]
            if node.op == "param":
                name = self._param_ids[node_id]
                if name in param_grads:
                    param_grads[name] = param_grads[name] + g
                else:
                    param_grads[name] = g
                continue
            for input_id, contrib in self._input_grads(node, g, needs):
                if input_id in adjoints:
                    adjoints[input_id] = adjoints[input_id] + contrib
                else:
                    adjoints[input_id] = contrib
        return {
            name: param_grads.get(name, np.zeros_like(self._nodes[nid].value))
            for nid, name in self._param_ids.items()
        }

    def _input_grads(self, node: _Node, g: np.ndarray, needs: list[bool]):
        op = node.op
        nodes = self._nodes
        if op in ("const", "param"):
            return
        if op == "conv2d":
            x_id, w_id = node.inputs[0], node.inputs[1]
            x, w = nodes[x_id].value, nodes[w_id].value
            pad = node.ctx["pad"]
            if needs[x_id]:
                yield x_id, conv2d_input_grad(g, w, pad)
            if needs[w_id]:
                yield w_id, conv2d_weight_grad(
                    g, x, w.shape[2:], pad, cols=node.ctx.get("cols")
                )
            if len(node.inputs) == 3 and needs[node.inputs[2]]:
                axes = tuple(i for i in range(g.ndim) if i != g.ndim - 3)
                yield node.inputs[2], g.sum(axis=axes)
        elif op == "leaky_relu":
            x_id = node.inputs[0]
            if needs[x_id]:
                yield x_id, g * leaky_relu_grad_raw(nodes[x_id].value, node.ctx["leak"])
        elif op == "sigmoid":
            if needs[node.inputs[0]]:
                s = node.value
                yield node.inputs[0], g * s * (1.0 - s)
        elif op == "add":
            if needs[node.inputs[0]]:
                yield node.inputs[0], g
            if needs[node.inputs[1]]:
                yield node.inputs[1], g
        elif op == "axpy":
            if needs[node.inputs[0]]:
                yield node.inputs[0], node.ctx["alpha"] * g
            if needs[node.inputs[1]]:
                yield node.inputs[1], g
        elif op == "downsample2":
            if needs[node.inputs[0]]:
                yield node.inputs[0], downsample2_grad_raw(g, node.ctx["in_shape"])
        elif op == "slice_channels":
            if needs[node.inputs[0]]:
                full = np.zeros(node.ctx["in_shape"], dtype=np.float64)
                full[:, node.ctx["start"] : node.ctx["stop"]] = g
                yield node.inputs[0], full
        elif op == "bce_mean":
            z_id, t_id = node.inputs[0], node.inputs[1]
            if needs[z_id]:
                z, t = nodes[z_id].value, nodes[t_id].value
                w = nodes[node.inputs[2]].value if len(node.inputs) == 3 else 1.0
                yield z_id, float(g) * w * (stable_sigmoid(z) - t) / z.size
        elif op == "masked_sq_err":
            p_id, t_id, m_id = node.inputs
            if needs[p_id]:
                p, t, m = nodes[p_id].value, nodes[t_id].value, nodes[m_id].value
                yield p_id, float(g) * 2.0 * m * (p - t) / node.ctx["count"]
        elif op == "masked_softmax_ce":
            z_id, t_id, m_id = node.inputs
            if needs[z_id]:
                z, t, m = nodes[z_id].value, nodes[t_id].value, nodes[m_id].value
                zmax = z.max(axis=1, keepdims=True)
                ez = np.exp(z - zmax)
                softmax = ez / ez.sum(axis=1, keepdims=True)
                yield z_id, float(g) * m * (softmax - t) / node.ctx["count"]
        elif op == "weighted_sum":
            for input_id, weight in zip(node.inputs, node.ctx["weights"]):
                if needs[input_id]:
                    yield input_id, float(g) * weight * np.ones_like(nodes[input_id].value)
        else:  # pragma: no cover
            raise RuntimeError(f"unknown op {op!r}")

    # -- replay --------------------------------------------------------

    def replay(self) -> bool:
        """Recompute every node from its inputs; True iff all values match bit-for-bit."""
        values: list[np.ndarray] = []
        for node in self._nodes:
            op = node.op
            ins = [values[i] for i in node.inputs]
            if op in ("const", "param"):
                out = node.value
            elif op == "conv2d":
                bias = ins[2] if len(ins) == 3 else None
                out = conv2d_raw(ins[0], ins[1], bias, node.ctx["pad"])
            elif op == "leaky_relu":
                out = leaky_relu_raw(ins[0], node.ctx["leak"])
            elif op == "sigmoid":
                out = stable_sigmoid(ins[0])
            elif op == "add":
                out = ins[0] + ins[1]
            elif op == "axpy":
                out = node.ctx["alpha"] * ins[0] + ins[1]
            elif op == "downsample2":
                out = downsample2_raw(ins[0])
            elif op == "slice_channels":
                out = np.ascontiguousarray(ins[0][:, node.ctx["start"] : node.ctx["stop"]])
            elif op == "bce_mean":
                elem = np.logaddexp(0.0, ins[0]) - ins[0] * ins[1]
                if len(ins) == 3:
                    elem = ins[2] * elem
                out = np.array(elem.mean())
            elif op == "masked_sq_err":
                out = np.array(float(np.sum(ins[2] * (ins[0] - ins[1]) ** 2) / node.ctx["count"]))
            elif op == "masked_softmax_ce":
                z, t, m = ins
                zmax = z.max(axis=1, keepdims=True)
                lse = zmax + np.log(np.sum(np.exp(z - zmax), axis=1, keepdims=True))
                ce = np.sum(t * (lse - z), axis=1, keepdims=True)
                out = np.array(float(np.sum(m * ce) / node.ctx["count"]))
            elif op == "weighted_sum":
                out = np.array(
                    sum(w * float(v) for w, v in zip(node.ctx["weights"], ins))
                )
            else:  # pragma: no cover
                raise RuntimeError(f"unknown op {op!r}")
            if not np.array_equal(out, node.value):
                return False
            values.append(node.value)
        return True

    def __len__(self) -> int:
        return len(self._nodes)


def finite_diff_grad(
    f: Callable[[ModelParams], float],
    params: ModelParams,
    name: str,
    flat_index: int,
    step: float = 1e-4,
) -> float:
    """Central finite difference of f along one parameter coordinate."""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    hi = f(params.perturbed(name, flat_index, +step))
    lo = f(params.perturbed(name, flat_index, -step))
    return (hi - lo) / (2.0 * step)


def sgd_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    lr: float,
    momentum: float = 0.0,
    velocity: Optional[dict[str, np.ndarray]] = None,
) -> tuple[ModelParams, dict[str, np.ndarray]]:
    """Momentum SGD update; momentum 0 is the plain rule theta <- theta - lr*g."""
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    if not (0.0 <= momentum < 1.0):
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    new_values: dict[str, np.ndarray] = {}
    new_velocity: dict[str, np.ndarray] = {}
    for name, value in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(value)
        if np.shape(g) != value.shape:
            raise ValueError(
                f"gradient shape {np.shape(g)} does not match parameter "
                f"{name!r} shape {value.shape}"
            )
        v_prev = velocity.get(name) if velocity else None
        v = momentum * v_prev + g if v_prev is not None else np.asarray(g, dtype=np.float64)
        new_velocity[name] = v
        new_values[name] = value - lr * v
    return params.with_updates(new_values), new_velocity
