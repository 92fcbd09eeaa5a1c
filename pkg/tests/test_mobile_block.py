"""Inverted-residual block: SE gating, shapes, residual rule, counts."""

import numpy as np
import pytest

from fakedet import autograd as ag
from fakedet.autograd import Tape
from fakedet.errors import ConfigError
from fakedet.mobile_block import InvertedResidual, SqueezeExcite, mbblock_param_table


def make_block(c_in=128, seed=0, dtype=np.float32, **kw):
    return InvertedResidual("blk", c_in, np.random.default_rng(seed), dtype, **kw)


class TestSqueezeExcite:
    def test_zero_weights_halve_the_input(self):
        se = SqueezeExcite("se", 8, 2, np.random.default_rng(0), np.float64)
        se.reduce.w.value[:] = 0
        se.expand.w.value[:] = 0
        u = np.random.default_rng(1).standard_normal((2, 3, 3, 8))
        t = Tape()
        out = se.apply(t.constant(u))
        np.testing.assert_allclose(out.value, u / 2, atol=1e-12)  # hard_sigmoid(0) = 0.5

    def test_gate_bounds_output(self):
        se = SqueezeExcite("se", 8, 2, np.random.default_rng(2), np.float64)
        u = np.random.default_rng(3).standard_normal((2, 4, 4, 8)) * 5
        t = Tape()
        out = se.apply(t.constant(u))
        assert (np.abs(out.value) <= np.abs(u) + 1e-12).all()

    def test_published_counts(self):
        se = SqueezeExcite("se", 576, 144, np.random.default_rng(4), np.float32)
        assert se.reduce.w.value.size == 82_944
        assert se.expand.w.value.size == 82_944


class TestForward:
    def test_stride_one_residual_shape(self):
        blk = make_block()
        x = np.random.default_rng(5).random((1, 8, 8, 128), dtype=np.float32)
        t = Tape()
        assert blk.apply(t.constant(x), "infer").shape == (1, 8, 8, 128)
        assert blk.residual

    def test_stride_two_skips_residual(self):
        blk = make_block(stride=2)
        x = np.zeros((1, 8, 8, 128), dtype=np.float32)
        t = Tape()
        assert blk.apply(t.constant(x), "infer").shape == (1, 4, 4, 128)
        assert not blk.residual

    def test_zero_weights_residual_identity(self):
        # projection emits zeros, identity-configured BN passes them, the
        # residual then returns the input untouched
        blk = make_block(seed=6)
        for layer in (blk.expand, blk.project, blk.se.reduce, blk.se.expand):
            layer.w.value[:] = 0
        blk.dw.k.value[:] = 0
        x = np.random.default_rng(7).random((2, 6, 6, 128), dtype=np.float32)
        t = Tape()
        out = blk.apply(t.constant(x), "infer")
        np.testing.assert_array_equal(out.value, x)

    def test_channel_width_mismatch_blocks_residual(self):
        blk = make_block(c_in=64)
        assert not blk.residual
        with pytest.raises(ConfigError, match="residual"):
            make_block(c_in=64, residual=True)
        with pytest.raises(ConfigError, match="residual"):
            make_block(stride=2, residual=True)

    def test_chained_blocks_preserve_shape(self):
        blocks = [make_block(seed=8 + i) for i in range(3)]
        x = np.random.default_rng(9).random((1, 8, 8, 128), dtype=np.float32)
        t = Tape()
        var = t.constant(x)
        for blk in blocks:
            var = blk.apply(var, "infer")
            assert var.shape == (1, 8, 8, 128)

    def test_se_gate_lies_in_unit_interval(self):
        blk = make_block(seed=10, dtype=np.float64)
        x = np.random.default_rng(11).standard_normal((2, 8, 8, 128)) * 3
        t = Tape()
        u = blk.bn2.apply(blk.dw.apply(ag.h_swish(blk.bn1.apply(blk.expand.apply(t.constant(x)), "infer")), 1), "infer")
        gated = blk.se.apply(u)
        with np.errstate(divide="ignore", invalid="ignore"):
            gate = np.where(u.value != 0, gated.value / u.value, 0.5)
        assert (gate >= -1e-12).all() and (gate <= 1 + 1e-12).all()


class TestParamCounts:
    def test_published_rows(self):
        rows, total = mbblock_param_table(128)
        counts = [r[1] for r in rows]
        assert 5_184 in counts  # depthwise over the expanded width
        assert counts.count(82_944) == 2  # both SE projections
        assert 73_728 in counts  # projection back to 128
        assert total == 323_648

    def test_expansion_scales_with_input_width(self):
        rows, _ = mbblock_param_table(256)
        assert rows[0][1] == 256 * 576

    def test_table_matches_instantiated(self):
        blk = make_block()
        actual = sum(p.value.size for p in blk.parameters())
        assert actual == mbblock_param_table(128)[1]


class TestGradients:
    def test_reduced_width_clone(self):
        blk = make_block(c_in=16, seed=12, dtype=np.float64, expand_channels=16, se_channels=4, out_channels=16)
        x = np.random.default_rng(13).standard_normal((2, 5, 5, 16))

        def build():
            t = Tape()
            return blk.apply(t.constant(x), "train")

        assert ag.finite_diff_check(build, eps=1e-5) <= 1e-4

    def test_full_width_sampled_coordinates(self):
        blk = make_block(seed=14, dtype=np.float64)
        x = np.random.default_rng(15).standard_normal((1, 4, 4, 128))

        def build():
            t = Tape()
            return blk.apply(t.constant(x), "train")

        assert ag.finite_diff_check(build, eps=1e-5, max_coords=60) <= 1e-4
