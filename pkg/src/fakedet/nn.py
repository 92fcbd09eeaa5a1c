"""Parameter-backed layers the network modules are assembled from."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Var


def he_uniform(rng, shape, fan_in, dtype):
    """He fan-in uniform init: U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class PointwiseConv:
    """1x1 convolution; bias only where the layer's published count has one."""

    def __init__(self, name, c_in, c_out, rng, dtype, bias=False):
        self.w = Parameter(f"{name}.w", he_uniform(rng, (c_in, c_out), c_in, dtype))
        self.b = Parameter(f"{name}.b", np.zeros(c_out, dtype=dtype)) if bias else None

    def apply(self, x: Var, stride=1):
        wv = x.tape.bind(self.w)
        bv = x.tape.bind(self.b) if self.b is not None else None
        return ag.conv1x1(x, wv, bv, stride)

    def parameters(self):
        yield self.w
        if self.b is not None:
            yield self.b


class DepthwiseConv:
    def __init__(self, name, channels, rng, dtype):
        self.k = Parameter(f"{name}.k", he_uniform(rng, (3, 3, channels), 9, dtype))

    def apply(self, x: Var, stride=1):
        return ag.depthwise3x3(x, x.tape.bind(self.k), stride)

    def parameters(self):
        yield self.k


class SeparableConv:
    """Depthwise 3x3 followed by a pointwise projection; no bias."""

    def __init__(self, name, c_in, c_out, rng, dtype):
        self.dw = DepthwiseConv(f"{name}.dw", c_in, rng, dtype)
        self.pw = PointwiseConv(f"{name}.pw", c_in, c_out, rng, dtype)

    def apply(self, x: Var, stride=1):
        return self.pw.apply(self.dw.apply(x, stride))

    def parameters(self):
        yield from self.dw.parameters()
        yield from self.pw.parameters()


class BatchNorm:
    """Per-channel normalization with moving statistics.

    Train mode uses batch statistics and updates the moving ones; a frozen
    layer (gamma non-trainable) always runs on moving statistics, so a frozen
    backbone stays bitwise inert during training.
    """

    def __init__(self, name, channels, dtype, eps=1e-3, momentum=0.99):
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.mean = Parameter(f"{name}.mean", np.zeros(channels, dtype=dtype), trainable=False)
        self.var = Parameter(f"{name}.var", np.ones(channels, dtype=dtype), trainable=False)
        self.eps = eps
        self.momentum = momentum

    def apply(self, x: Var, mode):
        gv, bv = x.tape.bind(self.gamma), x.tape.bind(self.beta)
        if mode == "train" and self.gamma.trainable:
            out, batch_mean, batch_var = ag.batch_norm_train(x, gv, bv, self.eps)
            m = self.momentum
            self.mean.value[:] = m * self.mean.value + (1 - m) * batch_mean
            self.var.value[:] = m * self.var.value + (1 - m) * batch_var
            return out
        return ag.batch_norm_infer(x, gv, bv, self.mean.value, self.var.value, self.eps)

    def parameters(self):
        yield from (self.gamma, self.beta, self.mean, self.var)


class Dense:
    def __init__(self, name, c_in, c_out, rng, dtype, init="he"):
        if init == "zeros":
            w = np.zeros((c_in, c_out), dtype=dtype)
        else:
            w = he_uniform(rng, (c_in, c_out), c_in, dtype)
        self.w = Parameter(f"{name}.w", w)
        self.b = Parameter(f"{name}.b", np.zeros(c_out, dtype=dtype))

    def apply(self, x: Var):
        return ag.dense(x, x.tape.bind(self.w), x.tape.bind(self.b))

    def parameters(self):
        yield self.w
        yield self.b
