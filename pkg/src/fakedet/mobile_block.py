"""Inverted-residual fine-tuning block with a squeeze-excitation gate.

Expand 1x1 -> BN -> h-swish -> depthwise 3x3 -> BN -> SE gate -> h-swish ->
project 1x1 -> linear BN -> residual add (stride 1 only, matching widths).
The clipped activations live only in these top-of-network blocks.
"""

from __future__ import annotations

from . import autograd as ag
from .autograd import Var
from .errors import ConfigError
from .nn import BatchNorm, DepthwiseConv, PointwiseConv


class SqueezeExcite:
    """Channel gate: pool -> reduce -> relu -> expand -> hard-sigmoid -> scale."""

    def __init__(self, name, channels, reduced, rng, dtype):
        self.reduce = PointwiseConv(f"{name}.reduce", channels, reduced, rng, dtype)
        self.expand = PointwiseConv(f"{name}.expand", reduced, channels, rng, dtype)

    def apply(self, u: Var):
        s = ag.relu(self.reduce.apply(ag.global_avg_pool(u)))
        s = ag.hard_sigmoid(self.expand.apply(s))
        return ag.mul(u, s)

    def parameters(self):
        yield from self.reduce.parameters()
        yield from self.expand.parameters()


class InvertedResidual:
    def __init__(
        self,
        name,
        c_in,
        rng,
        dtype,
        stride=1,
        expand_channels=576,
        se_channels=144,
        out_channels=128,
        bn_eps=1e-3,
        bn_momentum=0.99,
        residual=None,
    ):
        if stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {stride}")
        fits = stride == 1 and c_in == out_channels
        if residual is None:
            residual = fits
        elif residual and not fits:
            raise ConfigError(
                f"residual add needs stride 1 and c_in == c_out, got stride {stride}, {c_in} -> {out_channels}"
            )
        self.stride = stride
        self.residual = residual
        self.expand = PointwiseConv(f"{name}.expand", c_in, expand_channels, rng, dtype)
        self.bn1 = BatchNorm(f"{name}.bn1", expand_channels, dtype, bn_eps, bn_momentum)
        self.dw = DepthwiseConv(f"{name}.dw", expand_channels, rng, dtype)
        self.bn2 = BatchNorm(f"{name}.bn2", expand_channels, dtype, bn_eps, bn_momentum)
        self.se = SqueezeExcite(f"{name}.se", expand_channels, se_channels, rng, dtype)
        self.project = PointwiseConv(f"{name}.project", expand_channels, out_channels, rng, dtype)
        self.bn3 = BatchNorm(f"{name}.bn3", out_channels, dtype, bn_eps, bn_momentum)

    def apply(self, x: Var, mode):
        t = ag.h_swish(self.bn1.apply(self.expand.apply(x), mode))
        t = self.bn2.apply(self.dw.apply(t, self.stride), mode)
        t = ag.h_swish(self.se.apply(t))
        t = self.bn3.apply(self.project.apply(t), mode)
        if self.residual:
            t = ag.add(t, x)
        return t

    def parameters(self):
        yield from self.expand.parameters()
        yield from self.bn1.parameters()
        yield from self.dw.parameters()
        yield from self.bn2.parameters()
        yield from self.se.parameters()
        yield from self.project.parameters()
        yield from self.bn3.parameters()


def mbblock_param_table(c_in, expand_channels=576, se_channels=144, out_channels=128):
    """Per-layer (operation, parameter count, output width) rows plus total."""
    rows = [
        ("1x1 conv (expand)", c_in * expand_channels, expand_channels),
        ("batch norm", 4 * expand_channels, expand_channels),
        ("h-swish", 0, expand_channels),
        ("3x3 depthwise conv", 9 * expand_channels, expand_channels),
        ("batch norm", 4 * expand_channels, expand_channels),
        ("se: global avg pool", 0, expand_channels),
        ("se: 1x1 conv (reduce)", expand_channels * se_channels, se_channels),
        ("se: relu", 0, se_channels),
        ("se: 1x1 conv (expand)", se_channels * expand_channels, expand_channels),
        ("se: hard-sigmoid", 0, expand_channels),
        ("se: multiply", 0, expand_channels),
        ("h-swish", 0, expand_channels),
        ("1x1 conv (project)", expand_channels * out_channels, out_channels),
        ("linear", 0, out_channels),
        ("batch norm", 4 * out_channels, out_channels),
        ("add", 0, out_channels),
    ]
    total = sum(r[1] for r in rows)
    return rows, total
