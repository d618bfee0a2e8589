"""Closed-loop trajectory semantics and the contraction rescale."""

import numpy as np
import pytest

from fbdet.feedback import (
    CONTRACTION_TARGET,
    IffConfig,
    contraction_product,
    contraction_rescale,
    iff_forward,
)
from fbdet.spectral import embedded_filter_norm
from fbdet.tensor import ConvFilter, PaddingMode, Tensor


def random_filters(rng, cin=2, cout=3, k=3):
    head = ConvFilter(Tensor(rng.normal(size=(cout, cin, k, k))))
    feedback = ConvFilter(Tensor(rng.normal(size=(cin, cout, 1, 1))))
    return head, feedback


class TestIffConfig:
    def test_defaults(self):
        cfg = IffConfig()
        assert cfg.iterations == 1
        assert cfg.leak == 0.1
        assert cfg.pad is PaddingMode.ZERO

    def test_validation(self):
        with pytest.raises(ValueError):
            IffConfig(iterations=-1)
        with pytest.raises(ValueError):
            IffConfig(leak=0.0)
        with pytest.raises(ValueError):
            IffConfig(feedback_kernel=2)


class TestIffForward:
    def test_zero_feedback_collapses_to_baseline(self):
        rng = np.random.default_rng(0)
        x0 = Tensor(rng.normal(size=(2, 6, 6)))
        head = ConvFilter(Tensor(rng.normal(size=(3, 2, 3, 3))))
        feedback = ConvFilter(Tensor(np.zeros((2, 3, 1, 1))))
        for iterations in (1, 2, 3):
            traj = iff_forward(x0, head, feedback, IffConfig(iterations=iterations))
            base = traj.states[0]
            for state in traj.states:
                # bit-exact: adding an exactly-zero feedback term changes nothing
                assert np.array_equal(state.features.data, base.features.data)
                assert np.array_equal(state.output.data, base.output.data)

    def test_open_loop_single_state(self):
        rng = np.random.default_rng(1)
        x0 = Tensor(rng.normal(size=(1, 4, 4)))
        head = ConvFilter(Tensor(rng.normal(size=(1, 1, 3, 3))))
        feedback = ConvFilter(Tensor(rng.normal(size=(1, 1, 1, 1))))
        traj = iff_forward(x0, head, feedback, IffConfig(iterations=0))
        assert len(traj) == 1
        assert np.array_equal(traj.states[0].features.data, x0.data)

    def test_hand_unrolled_scalar_recurrence(self):
        # 1x1 filters on a constant image reduce to a scalar recurrence:
        # y0 = 2*1 = 2; x1 = 1 + 0.25*2 = 1.5; y1 = 2*1.5 = 3.
        x0 = Tensor(np.ones((1, 4, 4)))
        head = ConvFilter(Tensor([[[[2.0]]]]))
        feedback = ConvFilter(Tensor([[[[0.25]]]]))
        traj = iff_forward(x0, head, feedback, IffConfig(iterations=1, leak=0.1))
        assert np.allclose(traj.states[0].output.data, 2.0)
        assert np.allclose(traj.states[1].features.data, 1.5)
        assert np.allclose(traj.states[1].output.data, 3.0)

    def test_feedback_anchored_to_original_features(self):
        # x[k+1] - x[0] must equal the feedback term alone: the loop adds to
        # the original features, not to the previous iterate.
        from fbdet.tensor import conv2d, leaky_relu

        rng = np.random.default_rng(2)
        x0 = Tensor(rng.normal(size=(2, 5, 5)))
        head, feedback = random_filters(rng)
        cfg = IffConfig(iterations=3, leak=0.1)
        traj = iff_forward(x0, head, feedback, cfg)
        for k in range(3):
            fb = conv2d(leaky_relu(traj.states[k].output, cfg.leak), feedback, cfg.pad)
            delta = traj.states[k + 1].features.data - x0.data
            assert np.max(np.abs(delta - fb.data)) < 1e-12

    def test_determinism(self):
        rng = np.random.default_rng(3)
        x0 = Tensor(rng.normal(size=(2, 5, 5)))
        head, feedback = random_filters(rng)
        cfg = IffConfig(iterations=2)
        a = iff_forward(x0, head, feedback, cfg)
        b = iff_forward(x0, head, feedback, cfg)
        for sa, sb in zip(a.states, b.states):
            assert np.array_equal(sa.features.data, sb.features.data)
            assert np.array_equal(sa.output.data, sb.output.data)

    def test_shape_preservation(self):
        rng = np.random.default_rng(4)
        x0 = Tensor(rng.normal(size=(2, 7, 5)))
        head, feedback = random_filters(rng)
        traj = iff_forward(x0, head, feedback, IffConfig(iterations=2))
        for state in traj.states:
            assert state.features.shape == (2, 7, 5)
            assert state.output.shape == (3, 7, 5)

    def test_channel_mismatch_rejected(self):
        rng = np.random.default_rng(5)
        x0 = Tensor(rng.normal(size=(2, 5, 5)))
        head = ConvFilter(Tensor(rng.normal(size=(3, 2, 3, 3))))
        bad_feedback = ConvFilter(Tensor(rng.normal(size=(2, 2, 1, 1))))
        with pytest.raises(ValueError, match="feedback"):
            iff_forward(x0, head, bad_feedback, IffConfig())


class TestContractionRescale:
    def test_noop_when_product_below_one(self):
        # ||W1|| = 1, ||W2|| = 0.5 at an 8x8 extent -> product 0.25, unchanged.
        h = ConvFilter(Tensor(np.full((1, 1, 1, 1), 1.0 / 8.0)))
        f = ConvFilter(Tensor(np.full((1, 1, 1, 1), 0.5 / 8.0)))
        assert contraction_rescale(h, f, (8, 8)) is f

    def test_rescale_arithmetic(self):
        # ||W1|| = 1, ||W2|| = 2 -> product 4; scaling by 0.45 gives 0.81.
        h = ConvFilter(Tensor(np.full((1, 1, 1, 1), 1.0 / 8.0)))
        f = ConvFilter(Tensor(np.full((1, 1, 1, 1), 2.0 / 8.0)))
        out = contraction_rescale(h, f, (8, 8))
        assert out.weights.data[0, 0, 0, 0] == pytest.approx(0.45 * 2.0 / 8.0)
        assert contraction_product(h, out, (8, 8)) == pytest.approx(
            CONTRACTION_TARGET, rel=1e-12
        )

    def test_random_filters_hit_target(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            head = ConvFilter(Tensor(rng.normal(size=(1, 1, 3, 3))))
            feedback = ConvFilter(Tensor(rng.normal(size=(1, 1, 3, 3)) * 2.0))
            extent = (int(rng.integers(8, 17)), int(rng.integers(8, 17)))
            if contraction_product(head, feedback, extent) <= 1.0:
                continue
            out = contraction_rescale(head, feedback, extent)
            assert contraction_product(head, out, extent) == pytest.approx(
                CONTRACTION_TARGET, abs=1e-9
            )

    def test_zero_head_rejected(self):
        h = ConvFilter(Tensor(np.zeros((1, 1, 1, 1))))
        f = ConvFilter(Tensor(np.ones((1, 1, 1, 1))))
        with pytest.raises(ValueError, match="zero"):
            contraction_rescale(h, f, (8, 8))

    def test_norm_convention(self):
        # Spectral Frobenius norm of an embedded 1x1 kernel is sqrt(H*W)*|w|.
        f = ConvFilter(Tensor(np.full((1, 1, 1, 1), 0.9)))
        assert embedded_filter_norm(f, (8, 8)) == pytest.approx(0.9 * 8.0)
