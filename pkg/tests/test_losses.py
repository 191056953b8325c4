import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mesocast import autodiff as ad
from mesocast import losses
from gradcheck import assert_grads_close


# --- independent convolution-based oracle ------------------------------------

K = np.array([1, 4, 6, 4, 1]) / 16.0


def _np_pad(x, width, mode):
    return np.pad(x, width, mode="constant" if mode == "zero" else "edge")


def blur_oracle(x, mode):
    return np.convolve(_np_pad(x, 2, mode), K, mode="valid")


def reduce_oracle(x, mode):
    return blur_oracle(x, mode)[::2]


def expand_oracle(x, mode):
    padded = _np_pad(x, 1, mode)
    stuffed = np.zeros(2 * len(padded))
    stuffed[::2] = padded
    return np.convolve(stuffed, 2 * K, mode="valid")


def pyramid_oracle(x, depth, mode):
    target = losses.padded_length(len(x), depth)
    cur = _np_pad(x, (0, target - len(x)), mode)
    details = []
    for _ in range(depth):
        nxt = reduce_oracle(cur, mode)
        details.append(cur - expand_oracle(nxt, mode))
        cur = nxt
    return details, cur


def lap_oracle(x, y, depth, mode):
    dx, rx = pyramid_oracle(x, depth, mode)
    dy, ry = pyramid_oracle(y, depth, mode)
    total = sum(4 ** j * np.abs(a - b).sum() for j, (a, b) in enumerate(zip(dx, dy)))
    return total + 4 ** depth * np.abs(rx - ry).sum()


class TestMse:
    def test_identical_is_zero(self):
        x = np.random.default_rng(0).uniform(0, 1, (4, 21))
        assert losses.mse(x, x.copy()).item() == 0.0

    def test_unit_offset(self):
        assert losses.mse(np.zeros(2), np.ones(2)).item() == 1.0

    def test_display_scale_convention(self):
        # a raw MSE of 0.00066 reads 0.66 after the x1000 display scaling
        truth = np.zeros(4)
        pred = np.full(4, np.sqrt(0.00066))
        assert round(1000.0 * losses.mse(pred, truth).item(), 10) == pytest.approx(0.66)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            losses.mse(np.zeros(3), np.zeros(4))


class TestPyramid:
    @pytest.mark.parametrize("c", [0.875, 42.0, np.pi])
    def test_constant_profile_has_zero_details(self, c):
        p = losses.build_pyramid(np.full(21, c), depth=3, mode="replicate")
        for d in p.details:
            np.testing.assert_array_equal(d.data, np.zeros_like(d.data))
        np.testing.assert_array_equal(p.residual.data, np.full(3, c))

    @pytest.mark.parametrize("mode", ["zero", "replicate"])
    @pytest.mark.parametrize("depth", [1, 2, 3, 4])
    def test_reconstruction_reproduces_padded_input(self, mode, depth):
        rng = np.random.default_rng(depth)
        x = rng.uniform(0, 90, 21)
        p = losses.build_pyramid(x, depth, mode)
        rec = losses.reconstruct(p, mode)
        padded = _np_pad(x, (0, losses.padded_length(21, depth) - 21), mode)
        assert np.max(np.abs(rec - padded)) <= 1e-12

    def test_levels_match_convolution_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(-1, 1, 24)
        for mode in ("zero", "replicate"):
            p = losses.build_pyramid(x, 3, mode)
            details, residual = pyramid_oracle(x, 3, mode)
            for impl, ref in zip(p.details, details):
                np.testing.assert_allclose(impl.data, ref, rtol=0, atol=1e-12)
            np.testing.assert_allclose(p.residual.data, residual, rtol=0, atol=1e-12)

    def test_level_shapes(self):
        p = losses.build_pyramid(np.zeros(21), 3, "zero")
        assert [d.shape[-1] for d in p.details] == [24, 12, 6]
        assert p.residual.shape[-1] == 3

    def test_rowwise_matches_per_row(self):
        rng = np.random.default_rng(8)
        x = rng.uniform(0, 1, (3, 21))
        batched = losses.build_pyramid(x, 2, "zero")
        for r in range(3):
            single = losses.build_pyramid(x[r], 2, "zero")
            for bd, sd in zip(batched.details, single.details):
                np.testing.assert_array_equal(bd.data[r], sd.data)

    def test_depth_zero_rejected(self):
        with pytest.raises(ValueError, match="depth"):
            losses.build_pyramid(np.zeros(8), 0)

    @given(st.integers(0, 2**31 - 1), st.sampled_from([8, 16, 24, 32]),
           st.sampled_from(["zero", "replicate"]))
    def test_perfect_reconstruction_property(self, seed, length, mode):
        x = np.random.default_rng(seed).uniform(-5, 95, length)
        depth = 3
        p = losses.build_pyramid(x, depth, mode)
        padded = _np_pad(x, (0, losses.padded_length(length, depth) - length), mode)
        assert np.max(np.abs(losses.reconstruct(p, mode) - padded)) <= 1e-12


class TestLapLoss:
    def test_equal_inputs_zero(self):
        x = np.random.default_rng(0).uniform(0, 1, 21)
        assert losses.lap_loss(x, x.copy(), 3).item() == 0.0

    def test_depth_zero_disables_term(self):
        rng = np.random.default_rng(1)
        assert losses.lap_loss(rng.uniform(0, 1, 21), rng.uniform(0, 1, 21), 0).item() == 0.0

    def test_single_level_frozen_value(self):
        # unit impulse vs zeros, length 24, depth 1, zero padding;
        # 2.8125 = 45/16 computed with the convolution oracle
        x = np.zeros(24)
        x[0] = 1.0
        y = np.zeros(24)
        assert losses.lap_loss(x, y, 1, "zero").item() == pytest.approx(2.8125, abs=1e-12)
        assert lap_oracle(x, y, 1, "zero") == pytest.approx(2.8125, abs=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_oracle_on_random_profiles(self, seed):
        rng = np.random.default_rng(600 + seed)
        x, y = rng.uniform(0, 1, 21), rng.uniform(0, 1, 21)
        for depth in (1, 2, 3):
            impl = losses.lap_loss(x, y, depth, "zero").item()
            assert impl == pytest.approx(lap_oracle(x, y, depth, "zero"), abs=1e-10)

    @given(st.integers(0, 2**31 - 1))
    def test_symmetric_nonnegative_definite(self, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.uniform(0, 1, 21), rng.uniform(0, 1, 21)
        ab = losses.lap_loss(x, y, 2).item()
        ba = losses.lap_loss(y, x, 2).item()
        assert ab == pytest.approx(ba, abs=1e-12)
        assert ab >= 0.0
        assert losses.lap_loss(x, x, 2).item() == 0.0
        if np.max(np.abs(x - y)) > 1e-9:
            assert ab > 0.0

    def test_level_weight_quadruples(self):
        # same unit difference planted one level deeper contributes exactly 4x
        def planted(level, length):
            zeros = [ad.tensor(np.zeros(length >> j)) for j in range(3)]
            residual = ad.tensor(np.zeros(length >> 3))
            details = list(zeros)
            bump = np.zeros(length >> level)
            bump[0] = 1.0
            details[level] = ad.tensor(bump)
            return losses.PyramidLevels(details=details, residual=residual)

        base = losses.PyramidLevels(
            details=[ad.tensor(np.zeros(24 >> j)) for j in range(3)],
            residual=ad.tensor(np.zeros(3)),
        )
        contributions = [
            losses.pyramid_weighted_l1(planted(level, 24), base).item() for level in range(3)
        ]
        assert contributions[1] == 4.0 * contributions[0]
        assert contributions[2] == 4.0 * contributions[1]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            losses.lap_loss(np.zeros(21), np.zeros(22), 2)


class TestCombinedLoss:
    def test_zero_weight_equals_mse(self):
        rng = np.random.default_rng(2)
        p, t = rng.uniform(0, 1, 21), rng.uniform(0, 1, 21)
        cfg = losses.LossConfig(pyramid_depth=3, lap_weight=0.0)
        assert losses.combined_loss(p, t, cfg).item() == losses.mse(p, t).item()

    def test_equal_inputs_zero(self):
        x = np.random.default_rng(3).uniform(0, 1, 21)
        cfg = losses.LossConfig()
        assert losses.combined_loss(x, x.copy(), cfg).item() == 0.0

    def test_term_by_term_oracle(self):
        rng = np.random.default_rng(4)
        p, t = rng.uniform(0, 1, 21), rng.uniform(0, 1, 21)
        cfg = losses.LossConfig(pyramid_depth=3, lap_weight=1.0, padding_mode="zero")
        expected = losses.mse(p, t).item() + lap_oracle(p, t, 3, "zero") / 24.0
        assert losses.combined_loss(p, t, cfg).item() == pytest.approx(expected, abs=1e-12)

    def test_batched_normalisation(self):
        rng = np.random.default_rng(5)
        p, t = rng.uniform(0, 1, (4, 21)), rng.uniform(0, 1, (4, 21))
        cfg = losses.LossConfig(pyramid_depth=3, lap_weight=1.0)
        per_row_lap = sum(lap_oracle(p[r], t[r], 3, "zero") for r in range(4))
        expected = losses.mse(p, t).item() + per_row_lap / (24.0 * 4)
        assert losses.combined_loss(p, t, cfg).item() == pytest.approx(expected, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        truth = rng.uniform(0.1, 0.9, 21)
        pred0 = truth + rng.uniform(0.05, 0.2, 21) * np.sign(rng.uniform(-1, 1, 21))
        cfg = losses.LossConfig(pyramid_depth=3, lap_weight=1.0)

        def build(leaves):
            return losses.combined_loss(leaves[0], ad.tensor(truth), cfg)

        assert_grads_close(build, [pred0], h=1e-6, tol=1e-5)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            losses.LossConfig(pyramid_depth=-1)
        with pytest.raises(ValueError):
            losses.LossConfig(padding_mode="mirror")
