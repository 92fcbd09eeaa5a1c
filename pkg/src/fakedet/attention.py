"""The self-attention tower: the trainable image branch of the detector.

Each stage halves the resolution with a separable convolution, normalizes,
and runs one dot-product self-attention module over the spatial positions.
Stage widths double as resolution drops; a final pointwise expansion and
global average pool produce one 576-dimensional feature vector per image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Var
from .errors import ConfigError
from .nn import BatchNorm, PointwiseConv, SeparableConv


@dataclass
class AttentionTowerConfig:
    stage_widths: tuple = (32, 64, 128)
    bottleneck: int = 8
    out_channels: int = 576

    @property
    def stages(self):
        return len(self.stage_widths)


def tower_widths(stages):
    """Default width ladder: 32 doubled per stage."""
    return tuple(32 * 2**i for i in range(stages))


class SelfAttention:
    """Dot-product attention over spatial positions with a residual gate.

    Query/key projections squeeze channels by the bottleneck ratio; the value
    projection keeps full width. The gate scalar starts at exactly zero, so a
    freshly initialized module is the identity map.
    """

    def __init__(self, name, channels, bottleneck, rng, dtype):
        if channels % bottleneck:
            raise ConfigError(
                f"channels ({channels}) must be divisible by the bottleneck ratio ({bottleneck})"
            )
        squeezed = channels // bottleneck
        self.channels = channels
        self.f = PointwiseConv(f"{name}.f", channels, squeezed, rng, dtype, bias=True)
        self.g = PointwiseConv(f"{name}.g", channels, squeezed, rng, dtype, bias=True)
        self.h = PointwiseConv(f"{name}.h", channels, channels, rng, dtype, bias=True)
        self.gamma = Parameter(f"{name}.gamma", np.zeros(1, dtype=dtype))

    def apply(self, x: Var, return_attention=False):
        n, h, w, c = x.shape
        positions = h * w
        squeezed = self.f.w.value.shape[1]
        fx = ag.reshape(self.f.apply(x), (n, positions, squeezed))
        gx = ag.reshape(self.g.apply(x), (n, positions, squeezed))
        hx = ag.reshape(self.h.apply(x), (n, positions, c))
        # energies[b, j, i] = g(x_j) . f(x_i); softmax normalizes over i
        mixed, attn = ag.attention_mix(gx, fx, hx)
        mixed = ag.reshape(mixed, (n, h, w, c))
        out = ag.add(ag.mul(x.tape.bind(self.gamma), mixed), x)
        if return_attention:
            return out, attn
        return out

    def parameters(self):
        yield from self.f.parameters()
        yield from self.g.parameters()
        yield from self.h.parameters()
        yield self.gamma


class AttentionTower:
    def __init__(self, name, cfg: AttentionTowerConfig, in_channels, rng, dtype, bn_eps=1e-3, bn_momentum=0.99):
        self.cfg = cfg
        self.stages = []
        c_in = in_channels
        for i, width in enumerate(cfg.stage_widths):
            stage = f"{name}.stage{i + 1}"
            self.stages.append(
                (
                    SeparableConv(f"{stage}.conv", c_in, width, rng, dtype),
                    BatchNorm(f"{stage}.bn", width, dtype, bn_eps, bn_momentum),
                    SelfAttention(f"{stage}.attn", width, cfg.bottleneck, rng, dtype),
                )
            )
            c_in = width
        self.final_conv = PointwiseConv(f"{name}.final.conv", c_in, cfg.out_channels, rng, dtype)
        self.final_bn = BatchNorm(f"{name}.final.bn", cfg.out_channels, dtype, bn_eps, bn_momentum)

    def apply(self, x: Var, mode):
        """(n, s, s, c_in) -> (n, 1, 1, out_channels); s divisible by 2^stages."""
        for conv, bn, attn in self.stages:
            x = attn.apply(ag.relu(bn.apply(conv.apply(x, stride=2), mode)))
        x = ag.relu(self.final_bn.apply(self.final_conv.apply(x), mode))
        return ag.global_avg_pool(x)

    def parameters(self):
        for conv, bn, attn in self.stages:
            yield from conv.parameters()
            yield from bn.parameters()
            yield from attn.parameters()
        yield from self.final_conv.parameters()
        yield from self.final_bn.parameters()


def self_attention_param_count(channels, bottleneck=8):
    """Two squeezed projections with bias, one full-width with bias, one gate."""
    squeezed = channels // bottleneck
    return 2 * (channels * squeezed + squeezed) + (channels * channels + channels) + 1


def separable_conv_param_count(c_in, c_out):
    return 9 * c_in + c_in * c_out


def batch_norm_param_count(channels):
    return 4 * channels


def tower_param_table(cfg: AttentionTowerConfig, in_channels=3):
    """Per-layer (operation, parameter count, output width) rows plus total."""
    rows = []
    c_in = in_channels
    for i, width in enumerate(cfg.stage_widths, start=1):
        rows.append(("3x3 sep conv (s2)", separable_conv_param_count(c_in, width), width))
        rows.append(("batch norm", batch_norm_param_count(width), width))
        rows.append(("relu", 0, width))
        rows.append((f"stage {i} self-attention", self_attention_param_count(width, cfg.bottleneck), width))
        c_in = width
    rows.append(("1x1 conv", c_in * cfg.out_channels, cfg.out_channels))
    rows.append(("batch norm", batch_norm_param_count(cfg.out_channels), cfg.out_channels))
    rows.append(("relu", 0, cfg.out_channels))
    rows.append(("global avg pool", 0, cfg.out_channels))
    total = sum(r[1] for r in rows)
    return rows, total
