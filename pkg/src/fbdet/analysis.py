"""Numerical stability harness for the feedback loop.

Works in the spectral domain where circular convolution is an exact
elementwise product. For a head filter, feedback filter, and an additive
decomposition of the input features into an ideal map plus noise, it
computes the quadratic upper-bound coefficients on the one-step change of
the deviation energy V(Y) = ||Y - Y_ideal||^2, traces V along a closed-loop
trajectory, and flags any step where the bound or the conditional decrease
claim fails.

Filter norms are spectral Frobenius norms of the filter's max-norm 2D slice
zero-embedded to the working extent; feature norms are root-sum-square over
per-channel unnormalized spectra. Multi-channel inputs are supported, but
the quadratic bound is only a proven upper bound for the single-channel
loop, which is what the randomized verification sweeps use.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import spectral
from .feedback import IffConfig, contraction_rescale, iff_forward
from .spectral import ComplexTensor, channel_spectra, stacked_norm
from .tensor import ConvFilter, PaddingMode, Tensor, conv2d

BOUND_SLACK_TOLERANCE = 1e-6


@dataclass(frozen=True)
class IdealFeatureModel:
    """Additive decomposition of input features: observed = ideal + noise."""

    ideal: np.ndarray  # [C, H, W]
    noise: np.ndarray  # [C, H, W]

    def __post_init__(self):
        if self.ideal.shape != self.noise.shape:
            raise ValueError(
                f"ideal/noise shape mismatch: {self.ideal.shape} vs {self.noise.shape}"
            )

    @property
    def observed(self) -> np.ndarray:
        return self.ideal + self.noise

    def check_reconstruction(self, x0: np.ndarray, tol: float = 1e-12) -> None:
        gap = float(np.max(np.abs(self.observed - x0))) if x0.size else 0.0
        scale = max(float(np.max(np.abs(x0))), 1.0)
        if gap > tol * scale:
            raise ValueError(
                f"ideal + noise differs from supplied features by {gap:.3e}"
            )


def build_ideal_features(model, scene, cfg: IffConfig) -> tuple[IdealFeatureModel, np.ndarray]:
    """Constructive ideal features: the backbone output on the noiseless scene.

    The noise component is defined as the difference between the backbone
    output on the noisy rendering and on the clean rendering, which makes the
    additive decomposition exact rather than hypothetical.
    """
    from .detector import backbone_forward

    x0 = backbone_forward(model, scene.image[None], cfg.leak)[0]
    ideal = backbone_forward(model, scene.clean_image[None], cfg.leak)[0]
    return IdealFeatureModel(ideal=ideal, noise=x0 - ideal), x0


ComplexLike = Union[ComplexTensor, np.ndarray]


def _as_complex(x: ComplexLike) -> np.ndarray:
    arr = x.data if isinstance(x, ComplexTensor) else np.asarray(x)
    return arr.astype(np.complex128, copy=False)


def lyapunov(output_spectrum: ComplexLike, ideal_spectrum: ComplexLike) -> float:
    """Deviation energy ||Y - Y_ideal||^2; zero exactly at the ideal output."""
    y = _as_complex(output_spectrum)
    yn = _as_complex(ideal_spectrum)
    if y.shape != yn.shape:
        raise ValueError(f"spectrum shape mismatch: {y.shape} vs {yn.shape}")
    diff = y - yn
    return float(np.sum(diff.real**2 + diff.imag**2))


@dataclass(frozen=True)
class StabilityConstants:
    """Coefficients of the quadratic bound a*s^2 + b*s + c on V', s = ||X||.

    epsilon is the deviation threshold: whenever ||X - N|| exceeds it the
    bound is negative, forcing V to decrease. It is None when the contraction
    hypothesis (a < 0) is unmet, and 0.0 when the bound is negative for every
    s >= 0.
    """

    a: float
    b: float
    c: float
    epsilon: Optional[float]


def stability_constants(
    head: ConvFilter,
    feedback: ConvFilter,
    ideal: np.ndarray,
    noise: np.ndarray,
) -> StabilityConstants:
    """Bound coefficients for the given filters and feature decomposition.

    a = ||W1||^2 (||W1||^2 ||W2||^2 - 1)
    b = 2 (||W1||^2 ||N|| + ||W1||^3 ||D|| ||W2||)
    c = ||W1||^2 (||D||^2 - ||N||^2)

    with W1, W2 the embedded max-norm filter slices and N, D the spectra of
    the ideal and noise maps.
    """
    if ideal.ndim == 2:
        ideal = ideal[None]
    if noise.ndim == 2:
        noise = noise[None]
    extent = ideal.shape[-2:]
    n1 = spectral.embedded_filter_norm(head, extent)
    if n1 == 0.0:
        raise ValueError("head filter has zero norm")
    n2 = spectral.embedded_filter_norm(feedback, extent)
    n_norm = stacked_norm(channel_spectra(ideal))
    d_norm = stacked_norm(channel_spectra(noise))
    a = n1**2 * (n1**2 * n2**2 - 1.0)
    b = 2.0 * (n1**2 * n_norm + n1**3 * d_norm * n2)
    c = n1**2 * (d_norm**2 - n_norm**2)
    return StabilityConstants(a=a, b=b, c=c, epsilon=_epsilon(a, b, c, n_norm))


def _epsilon(a: float, b: float, c: float, n_norm: float) -> Optional[float]:
    if a >= 0.0:
        return None
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        # Bound negative for every s; any deviation at all forces decrease.
        return 0.0
    s_plus = (b + np.sqrt(disc)) / (2.0 * abs(a))
    # ||X|| >= ||X - N|| - ||N|| turns the root on ||X|| into a deviation bound.
    return float(s_plus + n_norm)


@dataclass(frozen=True)
class StabilityReport:
    """Step-by-step trace of the deviation energy against its quadratic bound."""

    constants: StabilityConstants
    hypothesis_met: bool
    v_trajectory: tuple[float, ...]
    v_changes: tuple[float, ...]
    bounds: tuple[float, ...]
    bound_slack: tuple[float, ...]
    feature_norms: tuple[float, ...]
    deviations: tuple[float, ...]
    triggered: tuple[bool, ...]
    violations: int
    conclusion_violations: int

    def rows(self) -> list[tuple]:
        """CSV rows (k, V, V', bound, slack) for each transition."""
        return [
            (k, self.v_trajectory[k], self.v_changes[k], self.bounds[k], self.bound_slack[k])
            for k in range(len(self.v_changes))
        ]


def bound_check(
    x0: np.ndarray,
    head: ConvFilter,
    feedback: ConvFilter,
    cfg: IffConfig,
    ideal: IdealFeatureModel,
    steps: int,
) -> StabilityReport:
    """Trace V along `steps` feedback iterations and check the quadratic bound.

    Requires circular padding (the spectral identities are exact only there).
    With enforce_contraction set, the feedback filter is rescaled into the
    hypothesis regime first; if the hypothesis a < 0 still fails the report
    is marked and no violations are counted.
    """
    if cfg.pad is not PaddingMode.CIRCULAR:
        raise ValueError("bound_check requires circular padding")
    if x0.ndim == 2:
        x0 = x0[None]
    ideal.check_reconstruction(x0)
    extent = x0.shape[-2:]
    fb = contraction_rescale(head, feedback, extent) if cfg.enforce_contraction else feedback
    consts = stability_constants(head, fb, ideal.ideal, ideal.noise)
    hypothesis_met = consts.a < 0.0

    run_cfg = IffConfig(
        iterations=steps,
        leak=cfg.leak,
        pad=PaddingMode.CIRCULAR,
        enforce_contraction=False,
        feedback_kernel=cfg.feedback_kernel,
    )
    traj = iff_forward(Tensor(x0), head, fb, run_cfg)
    ideal_out = conv2d(Tensor(ideal.ideal), head, PaddingMode.CIRCULAR)
    yn_spec = channel_spectra(ideal_out.data)
    n_spec = channel_spectra(ideal.ideal)

    v_traj: list[float] = []
    s_norms: list[float] = []
    deviations: list[float] = []
    for state in traj.states:
        y_spec = channel_spectra(state.output.data)
        x_spec = channel_spectra(state.features.data)
        v_traj.append(lyapunov(y_spec, yn_spec))
        s_norms.append(stacked_norm(x_spec))
        deviations.append(stacked_norm(x_spec - n_spec))

    v_changes, bounds, slack, triggered = [], [], [], []
    violations = 0
    conclusion_violations = 0
    for k in range(steps):
        dv = v_traj[k + 1] - v_traj[k]
        s = s_norms[k]
        q = consts.a * s * s + consts.b * s + consts.c
        v_changes.append(dv)
        bounds.append(q)
        slack.append(q - dv)
        fired = consts.epsilon is not None and deviations[k] > consts.epsilon
        triggered.append(fired)
        if hypothesis_met:
            scale = max(abs(dv), abs(q), 1e-12)
            if q - dv < -BOUND_SLACK_TOLERANCE * scale:
                violations += 1
            if fired and dv > BOUND_SLACK_TOLERANCE * max(v_traj[k], 1e-12):
                conclusion_violations += 1

    return StabilityReport(
        constants=consts,
        hypothesis_met=hypothesis_met,
        v_trajectory=tuple(v_traj),
        v_changes=tuple(v_changes),
        bounds=tuple(bounds),
        bound_slack=tuple(slack),
        feature_norms=tuple(s_norms),
        deviations=tuple(deviations),
        triggered=tuple(triggered),
        violations=violations,
        conclusion_violations=conclusion_violations,
    )


# ---------------------------------------------------------------------------
# Feature-map energy statistics and heatmaps
# ---------------------------------------------------------------------------


def normalize_feature(feature: np.ndarray) -> np.ndarray:
    """Channel-sum then min-max normalize to [0, 1]; a flat map normalizes to 0."""
    if feature.ndim == 3:
        summed = feature.sum(axis=0)
    elif feature.ndim == 2:
        summed = feature
    else:
        raise ValueError(f"expected a [C, H, W] or [H, W] feature, got {feature.shape}")
    low, high = float(summed.min()), float(summed.max())
    if high == low:
        return np.zeros_like(summed)
    return (summed - low) / (high - low)


@dataclass(frozen=True)
class EnergyDistributions:
    """Histograms of normalized per-pixel values, split background/foreground."""

    bin_centers: np.ndarray
    background: np.ndarray
    foreground: np.ndarray
    background_mean: float
    foreground_mean: float
    background_empty: bool
    foreground_empty: bool


def energy_histogram(
    features: Sequence[np.ndarray],
    fg_masks: Sequence[np.ndarray],
    bins: int = 50,
) -> EnergyDistributions:
    """Pool normalized feature values over a corpus, split by foreground masks.

    Masks are binary arrays at the feature-map extent. Each returned
    histogram sums to 1 over [0, 1]; an empty pixel class is flagged and its
    histogram left at zero.
    """
    if len(features) != len(fg_masks):
        raise ValueError("features and masks must pair up")
    bg_vals: list[np.ndarray] = []
    fg_vals: list[np.ndarray] = []
    for feature, mask in zip(features, fg_masks):
        norm = normalize_feature(feature)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != norm.shape:
            raise ValueError(
                f"mask shape {mask.shape} does not match feature extent {norm.shape}"
            )
        fg_vals.append(norm[mask])
        bg_vals.append(norm[~mask])
    bg = np.concatenate(bg_vals) if bg_vals else np.empty(0)
    fg = np.concatenate(fg_vals) if fg_vals else np.empty(0)
    edges = np.linspace(0.0, 1.0, bins + 1)
    centers = (edges[:-1] + edges[1:]) / 2.0

    def _hist(values: np.ndarray) -> np.ndarray:
        if values.size == 0:
            return np.zeros(bins)
        counts, _ = np.histogram(values, bins=edges)
        return counts / values.size

    return EnergyDistributions(
        bin_centers=centers,
        background=_hist(bg),
        foreground=_hist(fg),
        background_mean=float(bg.mean()) if bg.size else 0.0,
        foreground_mean=float(fg.mean()) if fg.size else 0.0,
        background_empty=bg.size == 0,
        foreground_empty=fg.size == 0,
    )


def box_mask(objects, grid: int, image_size: int) -> np.ndarray:
    """Grid-resolution foreground mask: cells whose area overlaps any box."""
    mask = np.zeros((grid, grid), dtype=bool)
    cell = image_size / grid
    for obj in objects:
        x, y, w, h = obj.box
        j0 = max(int(np.floor(x / cell)), 0)
        j1 = min(int(np.ceil((x + w) / cell)), grid)
        i0 = max(int(np.floor(y / cell)), 0)
        i1 = min(int(np.ceil((y + h) / cell)), grid)
        mask[i0:i1, j0:j1] = True
    return mask


def heatmap_export(feature: np.ndarray, out_size: Union[int, tuple[int, int]]) -> np.ndarray:
    """Channel-summed, normalized, nearest-neighbor upsampled 8-bit heatmap."""
    norm = normalize_feature(np.asarray(feature, dtype=np.float64))
    if isinstance(out_size, int):
        out_h = out_w = out_size
    else:
        out_h, out_w = out_size
    h, w = norm.shape
    rows = (np.arange(out_h) * h // out_h).astype(int)
    cols = (np.arange(out_w) * w // out_w).astype(int)
    up = norm[np.ix_(rows, cols)]
    return np.round(up * 255.0).astype(np.uint8)
