"""Randomized verification sweeps behind the `verify` command.

Each sweep draws random instances, evaluates an identity or inequality with
both of its sides computed independently, and reports the violation count
plus the worst observed margin. Zero violations is the pass condition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import analysis, spectral
from .feedback import IffConfig
from .scenes import SceneSpec, gen_scene
from .tensor import ConvFilter, PaddingMode, Tensor

PARSEVAL_TOLERANCE = 1e-9
CONTRACTION_TOLERANCE = 1e-9
CONV_THEOREM_TOLERANCE = 1e-8
GRADCHECK_TOLERANCE = 1e-4
FD_STEP = 1e-4


@dataclass
class SweepResult:
    """Outcome of one randomized sweep."""

    suite: str
    trials: int
    violations: int
    worst: float  # largest observed violation metric (suite-specific)
    rows: list[tuple] = field(default_factory=list)
    header: tuple[str, ...] = ()

    @property
    def passed(self) -> bool:
        return self.violations == 0


def run_parseval(trials: int, seed: int) -> SweepResult:
    """Spatial energy vs 1/(HW)-scaled spectral energy on random tensors."""
    rng = np.random.default_rng([seed, 1])
    worst = 0.0
    violations = 0
    rows = []
    for t in range(trials):
        h = int(rng.integers(4, 65))
        w = int(rng.integers(4, 65))
        x = rng.normal(0.0, 1.0, (h, w))
        spatial, scaled_spectral = spectral.spectral_energy(x)
        gap = abs(spatial - scaled_spectral) / max(spatial, 1e-300)
        worst = max(worst, gap)
        if gap >= PARSEVAL_TOLERANCE:
            violations += 1
        if t < 200:
            rows.append((t, h, w, spatial, scaled_spectral, gap))
    return SweepResult(
        suite="parseval",
        trials=trials,
        violations=violations,
        worst=worst,
        rows=rows,
        header=("trial", "h", "w", "spatial", "spectral_over_n", "rel_gap"),
    )


def run_energy_contraction(trials: int, seed: int) -> SweepResult:
    """Leaky ReLU must not increase spectral energy, for a grid of slopes."""
    rng = np.random.default_rng([seed, 2])
    leaks = (0.01, 0.1, 0.5, 0.9)
    worst = 0.0
    violations = 0
    rows = []
    per_leak = max(trials // len(leaks), 1)
    t = 0
    for leak in leaks:
        for _ in range(per_leak):
            x = Tensor(rng.normal(0.0, 1.0, (16, 16)))
            report = spectral.energy_contraction_check(x, leak)
            excess = (report.lhs - report.rhs) / max(report.rhs, 1e-300)
            worst = max(worst, excess)
            if not report.holds:
                violations += 1
            if t < 200:
                rows.append((t, leak, report.lhs, report.rhs, excess))
            t += 1
    return SweepResult(
        suite="theorem1",
        trials=t,
        violations=violations,
        worst=worst,
        rows=rows,
        header=("trial", "leak", "lhs", "rhs", "rel_excess"),
    )


def _random_bound_instance(rng: np.random.Generator):
    h = int(rng.integers(8, 17))
    w = int(rng.integers(8, 17))
    k1 = int(rng.choice([1, 3]))
    k2 = int(rng.choice([1, 3]))
    head = ConvFilter(Tensor(rng.normal(0.0, 0.6, (1, 1, k1, k1))))
    feedback = ConvFilter(Tensor(rng.normal(0.0, 0.6, (1, 1, k2, k2))))
    ideal = rng.normal(0.0, 1.0, (1, h, w))
    noise_scale = float(rng.uniform(0.1, 4.0))
    noise = rng.normal(0.0, noise_scale, (1, h, w))
    return head, feedback, ideal, noise


def run_bound_sweep(configs: int, seed: int, steps: int = 5) -> SweepResult:
    """Quadratic bound on V' plus the conditional decrease, contraction enforced."""
    rng = np.random.default_rng([seed, 3])
    worst = 0.0
    violations = 0
    rows = []
    cfg = IffConfig(
        iterations=steps,
        leak=0.1,
        pad=PaddingMode.CIRCULAR,
        enforce_contraction=True,
    )
    for t in range(configs):
        head, feedback, ideal, noise = _random_bound_instance(rng)
        x0 = ideal + noise
        report = analysis.bound_check(
            x0, head, feedback, cfg, analysis.IdealFeatureModel(ideal, noise), steps
        )
        if not report.hypothesis_met:
            violations += 1  # contraction enforcement must yield a < 0
        violations += report.violations + report.conclusion_violations
        worst_slack = min(
            (s / max(abs(b), 1e-12) for s, b in zip(report.bound_slack, report.bounds)),
            default=0.0,
        )
        worst = max(worst, -min(worst_slack, 0.0))
        rows.append(
            (
                t,
                report.constants.a,
                report.constants.b,
                report.constants.c,
                report.constants.epsilon if report.constants.epsilon is not None else "",
                report.violations,
                report.conclusion_violations,
            )
        )
    return SweepResult(
        suite="theorem2",
        trials=configs,
        violations=violations,
        worst=worst,
        rows=rows,
        header=("config", "a", "b", "c", "epsilon", "bound_violations", "decrease_violations"),
    )


def run_conv_theorem(trials: int, seed: int) -> SweepResult:
    """Circular convolution vs elementwise spectrum product."""
    rng = np.random.default_rng([seed, 4])
    worst = 0.0
    violations = 0
    rows = []
    for t in range(trials):
        h = int(rng.integers(4, 17))
        w = int(rng.integers(4, 17))
        k = int(rng.choice([1, 3]))
        x = Tensor(rng.normal(0.0, 1.0, (h, w)))
        kernel = Tensor(rng.normal(0.0, 1.0, (k, k)))
        report = spectral.convolution_theorem_check(x, kernel)
        worst = max(worst, report.rel_diff)
        if not report.holds:
            violations += 1
        if t < 200:
            rows.append((t, h, w, k, report.rel_diff))
    return SweepResult(
        suite="convtheorem",
        trials=trials,
        violations=violations,
        worst=worst,
        rows=rows,
        header=("trial", "h", "w", "k", "rel_diff"),
    )


def _leaky_sign_pattern(tape) -> np.ndarray:
    """Concatenated sign pattern of every leaky ReLU input on a tape."""
    signs = [
        (tape.value(node.inputs[0]) > 0).ravel()
        for node in tape._nodes
        if node.op == "leaky_relu"
    ]
    return np.concatenate(signs) if signs else np.zeros(0, dtype=bool)


def _kink_gap(tape) -> float:
    """Smallest |pre-activation| feeding any leaky ReLU on a tape."""
    return min(
        (
            float(np.min(np.abs(tape.value(node.inputs[0]))))
            for node in tape._nodes
            if node.op == "leaky_relu"
        ),
        default=np.inf,
    )


def gradcheck_model(
    params,
    images: np.ndarray,
    targets,
    cfg: IffConfig,
    probes_per_tensor: int,
    seed: int,
    step: float = FD_STEP,
    tolerance: float = GRADCHECK_TOLERANCE,
) -> SweepResult:
    """Reverse-mode gradients vs central finite differences on random coordinates.

    Kink-adjacent probes are excluded: a probe whose +/-step perturbation
    flips any leaky ReLU input sign (or whose base pre-activations sit within
    1e-6 of the kink) straddles a non-differentiable point, where finite
    differences say nothing about the gradient.
    """
    from .train import build_loss_tape

    rng = np.random.default_rng([seed, 5])
    tape, loss_id = build_loss_tape(params, images, targets, cfg)
    grads = tape.backward(loss_id)
    base_kink_adjacent = _kink_gap(tape) < 1e-6

    def loss_and_signs(p) -> tuple[float, np.ndarray]:
        t, lid = build_loss_tape(p, images, targets, cfg)
        return float(t.value(lid)), _leaky_sign_pattern(t)

    worst = 0.0
    violations = 0
    excluded = 0
    rows = []
    for name in params.names():
        size = params[name].size
        count = min(probes_per_tensor, size)
        coords = rng.choice(size, size=count, replace=False)
        for flat in coords:
            flat = int(flat)
            if base_kink_adjacent:
                excluded += 1
                continue
            hi_loss, hi_signs = loss_and_signs(params.perturbed(name, flat, +step))
            lo_loss, lo_signs = loss_and_signs(params.perturbed(name, flat, -step))
            if not np.array_equal(hi_signs, lo_signs):
                excluded += 1
                continue
            fd = (hi_loss - lo_loss) / (2.0 * step)
            ad = float(grads[name].flat[flat])
            scale = max(abs(ad), abs(fd))
            if scale < 1e-9:
                rel = 0.0  # both effectively zero
            else:
                rel = abs(ad - fd) / scale
            worst = max(worst, rel)
            if rel > tolerance:
                violations += 1
            rows.append((name, flat, ad, fd, rel))
    return SweepResult(
        suite="gradcheck",
        trials=len(rows) + excluded,
        violations=violations,
        worst=worst,
        rows=rows,
        header=("parameter", "coordinate", "reverse_mode", "finite_diff", "rel_err"),
    )


def run_gradcheck(probes_per_tensor: int, seed: int) -> SweepResult:
    """Gradcheck on a freshly initialized detector over a small scene batch."""
    from .detector import build_model
    from .train import build_loss_tape, build_targets, stack_targets

    cfg = IffConfig(iterations=1, leak=0.1, pad=PaddingMode.ZERO)
    spec = SceneSpec(noise_level=0.2)
    for attempt in range(10):
        instance_seed = int(seed) + 1000 * attempt
        model = build_model(instance_seed)
        # Give the feedback path nonzero weights so its gradients are exercised.
        rng = np.random.default_rng([instance_seed, 6])
        fb = rng.normal(0.0, 0.05, model.params["feedback.weight"].shape)
        params = model.params.with_updates({"feedback.weight": fb})
        scenes = [gen_scene((instance_seed, i), spec) for i in range(2)]
        images = np.stack([s.image for s in scenes])
        targets = stack_targets([build_targets(s) for s in scenes])
        tape, _ = build_loss_tape(params, images, targets, cfg)
        if _kink_gap(tape) >= 1e-6:
            break
    return gradcheck_model(params, images, targets, cfg, probes_per_tensor, seed)


SUITES: dict[str, Callable[[int, int], SweepResult]] = {
    "parseval": run_parseval,
    "theorem1": run_energy_contraction,
    "theorem2": run_bound_sweep,
    "convtheorem": run_conv_theorem,
    "gradcheck": run_gradcheck,
}


def run_suite(name: str, trials: int, seed: int) -> SweepResult:
    if name not in SUITES:
        raise KeyError(f"unknown verification suite {name!r}")
    return SUITES[name](trials, seed)
