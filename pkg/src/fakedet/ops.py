"""Dense rank-4 tensor primitives and their analytic gradients.

Activations live in channels-last layout (n, h, w, c), stored as contiguous
row-major float32 arrays (float64 when gradient checking). Every forward
function here is pure; each has a matching ``*_vjp`` that maps the upstream
gradient back onto its inputs. The taping layer in :mod:`fakedet.autograd`
pairs them up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError


def flat_index(shape, n, h, w, c):
    """Row-major offset of (n, h, w, c) in a tensor of the given shape."""
    _, hs, ws, cs = shape
    return ((n * hs + h) * ws + w) * cs + c


def coords_from_flat(shape, idx):
    """Inverse of :func:`flat_index`."""
    _, hs, ws, cs = shape
    idx, c = divmod(idx, cs)
    idx, w = divmod(idx, ws)
    n, h = divmod(idx, hs)
    return n, h, w, c


def out_size(size, stride):
    """Spatial extent after a same-padded stride-s op: ceil(size / stride)."""
    return -(-size // stride)


def _check_stride(stride):
    if stride not in (1, 2):
        raise ConfigError(f"stride must be 1 or 2, got {stride}")


@dataclass
class ConvWeights:
    """Weights of a 1x1 or depthwise-separable 3x3 convolution.

    ``pointwise`` is (c_in, c_out), ``depthwise`` is (3, 3, c); ``bias`` is
    present only on the attention projections (the only convolutions whose
    published counts decompose with a bias term).
    """

    pointwise: np.ndarray | None = None
    depthwise: np.ndarray | None = None
    bias: np.ndarray | None = None

    def param_count(self):
        total = 0
        if self.pointwise is not None:
            total += self.pointwise.size
        if self.depthwise is not None:
            total += self.depthwise.size
        if self.bias is not None:
            total += self.bias.size
        return total


@dataclass
class BatchNormParams:
    """Per-channel affine + moving statistics. Only gamma/beta train."""

    gamma: np.ndarray
    beta: np.ndarray
    moving_mean: np.ndarray
    moving_var: np.ndarray
    eps: float = 1e-3

    def param_count(self):
        # gamma, beta, moving mean, moving var: 4 per channel
        return 4 * self.gamma.size


def conv1x1(x, w, b=None, stride=1):
    """Pointwise convolution: per-position matmul over channels.

    Output shape (n, ceil(h/s), ceil(w/s), c_out); stride subsamples the grid.
    """
    _check_stride(stride)
    if x.shape[3] != w.shape[0]:
        raise ShapeError(
            f"channel axis mismatch: input has {x.shape[3]} channels, "
            f"pointwise weights expect {w.shape[0]}"
        )
    xs = x[:, ::stride, ::stride, :]
    y = xs @ w
    if b is not None:
        y = y + b
    return y


def conv1x1_vjp_x(g, x_shape, w, stride=1):
    if stride == 1:
        return g @ w.T
    dx = np.zeros(x_shape, dtype=g.dtype)
    dx[:, ::stride, ::stride, :] = g @ w.T
    return dx


def conv1x1_vjp_w(g, x, stride=1):
    xs = x[:, ::stride, ::stride, :]
    return xs.reshape(-1, xs.shape[3]).T @ g.reshape(-1, g.shape[3])


def conv1x1_vjp(g, x, w, b=None, stride=1):
    dx = conv1x1_vjp_x(g, x.shape, w, stride)
    dw = conv1x1_vjp_w(g, x, stride)
    db = g.sum(axis=(0, 1, 2)) if b is not None else None
    return dx, dw, db


def same_padding(size, stride, kernel=3):
    """Zero-fill margins so that out = ceil(in / stride) for a 3x3 kernel."""
    out = out_size(size, stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def depthwise3x3(x, k, stride=1):
    """Per-channel 3x3 convolution with same padding; no channel mixing."""
    _check_stride(stride)
    if k.shape != (3, 3, x.shape[3]):
        raise ShapeError(
            f"channel axis mismatch: input has {x.shape[3]} channels, "
            f"depthwise kernel is {k.shape}"
        )
    n, h, w, c = x.shape
    oh, ow = out_size(h, stride), out_size(w, stride)
    (pt, pb), (pl, pr) = same_padding(h, stride), same_padding(w, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    y = np.zeros((n, oh, ow, c), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            y += xp[:, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride, :] * k[ki, kj]
    return y


def depthwise3x3_vjp(g, x, k, stride=1, need_x=True, need_k=True):
    n, h, w, c = x.shape
    oh, ow = g.shape[1], g.shape[2]
    (pt, pb), (pl, pr) = same_padding(h, stride), same_padding(w, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if need_k else None
    dxp = np.zeros((n, h + pt + pb, w + pl + pr, c), dtype=g.dtype) if need_x else None
    dk = np.zeros_like(k) if need_k else None
    for ki in range(3):
        for kj in range(3):
            sl = np.s_[:, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride, :]
            if need_k:
                dk[ki, kj] = np.einsum("nhwc,nhwc->c", g, xp[sl])
            if need_x:
                dxp[sl] += g * k[ki, kj]
    dx = dxp[:, pt : pt + h, pl : pl + w, :] if need_x else None
    return dx, dk


def depthwise_separable_conv3x3(x, w: ConvWeights, stride=1):
    """Depthwise 3x3 (strided, same padding) then pointwise 1x1; no bias."""
    return conv1x1(depthwise3x3(x, w.depthwise, stride), w.pointwise)


def batch_norm_infer(x, p: BatchNormParams):
    """Normalize with the stored moving statistics."""
    inv = 1.0 / np.sqrt(p.moving_var + p.eps)
    return p.gamma * (x - p.moving_mean) * inv + p.beta


def batch_norm_infer_vjp(g, x, p: BatchNormParams):
    inv = 1.0 / np.sqrt(p.moving_var + p.eps)
    dx = g * (p.gamma * inv)
    dgamma = (g * (x - p.moving_mean) * inv).sum(axis=(0, 1, 2))
    dbeta = g.sum(axis=(0, 1, 2))
    return dx, dgamma, dbeta


def batch_norm_train(x, gamma, beta, eps):
    """Normalize with batch statistics over (n, h, w).

    Returns the output plus the batch mean/var and the cache the backward
    pass needs. Moving-statistic bookkeeping is the caller's job.
    """
    n = x.shape[0] * x.shape[1] * x.shape[2]
    mean = x.mean(axis=(0, 1, 2))
    xhat = x - mean
    var = np.einsum("nhwc,nhwc->c", xhat, xhat) / n
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
        raise NumericError("batch statistics are non-finite")
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    return gamma * xhat + beta, mean, var, (xhat, inv)


def batch_norm_train_vjp(g, gamma, cache):
    # Differentiates through the batch statistics (full formula).
    xhat, inv = cache
    n = xhat.shape[0] * xhat.shape[1] * xhat.shape[2]
    dgamma = np.einsum("nhwc,nhwc->c", g, xhat)
    dbeta = g.sum(axis=(0, 1, 2))
    dx = g * gamma
    dx -= (gamma * dbeta) / n
    dx -= xhat * ((gamma * dgamma) / n)
    dx *= inv
    return dx, dgamma, dbeta


def relu(x):
    return np.maximum(x, 0)


def relu_vjp(g, x):
    return g * (x > 0)


def relu6(x):
    return np.clip(x, 0, 6)


def relu6_vjp(g, x):
    # Closed interval: boundary subgradient taken from the interior branch.
    return g * ((x >= 0) & (x <= 6))


def h_swish(x):
    # grouped so the saturated branch is exactly x * 1
    return x * (relu6(x + 3) / 6)


def h_swish_vjp(g, x):
    # relu6(x+3)/6 + x/6 on the interior; subgradient at +-3 from the interior
    d = relu6(x + 3)
    d += x * ((x >= -3) & (x <= 3))
    d *= g
    d /= 6
    return d


def hard_sigmoid(x):
    return relu6(x + 3) / 6


def hard_sigmoid_vjp(g, x):
    return g * ((x >= -3) & (x <= 3)) / 6


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_vjp(g, y):
    # y is the forward output
    return g * y * (1 - y)


def softmax_rows(s):
    """Row-wise softmax over the last axis, max-subtracted for stability."""
    out = s - s.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    denom = out.sum(axis=-1, keepdims=True)
    np.divide(1.0, denom, out=denom)
    out *= denom
    return out


def softmax_rows_vjp(g, y):
    # Jacobian-vector identity y * (g - sum(g * y)): one row-dot via einsum,
    # no LxL Jacobian and no full-size product temporary.
    dot = np.einsum("...i,...i->...", g, y)[..., None]
    out = g - dot
    out *= y
    return out


def attention_mix(g_flat, f_flat, h_flat, chunk=64):
    """Fused softmax attention over flattened positions.

    Computes batchdot(softmax_rows(g @ f^T), h) in row chunks so the energy
    matrix is never materialized and the per-chunk working set stays cached.
    Semantically identical to composing the three primitives; returns the
    mixed values and the attention map (needed for the backward pass).
    """
    n, length, _ = g_flat.shape
    c = h_flat.shape[2]
    beta = np.empty((n, length, length), dtype=g_flat.dtype)
    out = np.empty((n, length, c), dtype=g_flat.dtype)
    sbuf = np.empty((min(chunk, length), length), dtype=g_flat.dtype)
    for b in range(n):
        fb_t = f_flat[b].T
        for j0 in range(0, length, chunk):
            j1 = min(j0 + chunk, length)
            s = sbuf[: j1 - j0]
            np.matmul(g_flat[b, j0:j1], fb_t, out=s)
            s -= s.max(axis=1, keepdims=True)
            np.exp(s, out=s)
            denom = s.sum(axis=1, keepdims=True)
            np.divide(1.0, denom, out=denom)
            s *= denom
            beta[b, j0:j1] = s
            np.matmul(s, h_flat[b], out=out[b, j0:j1])
    return out, beta


def attention_mix_vjp(g, beta, g_flat, f_flat, h_flat, chunk=64):
    n, length, _ = g_flat.shape
    dg_flat = np.empty_like(g_flat)
    df_flat = np.zeros_like(f_flat)
    dh_flat = np.zeros_like(h_flat)
    for b in range(n):
        gb, fb, hb = g_flat[b], f_flat[b], h_flat[b]
        hb_t = hb.T
        for j0 in range(0, length, chunk):
            j1 = min(j0 + chunk, length)
            beta_chunk = beta[b, j0:j1]
            upstream = g[b, j0:j1]
            dh_flat[b] += beta_chunk.T @ upstream
            ds = upstream @ hb_t
            ds -= np.einsum("ji,ji->j", ds, beta_chunk)[:, None]
            ds *= beta_chunk
            np.matmul(ds, fb, out=dg_flat[b, j0:j1])
            df_flat[b] += ds.T @ gb[j0:j1]
    return dg_flat, df_flat, dh_flat


def batchdot(beta, hflat):
    """Per-batch-element matmul: out[b, j, :] = sum_i beta[b, j, i] * hflat[b, i, :]."""
    if beta.shape[-1] != hflat.shape[-2]:
        raise ShapeError(
            f"inner axis mismatch: attention map has {beta.shape[-1]} keys, "
            f"values have {hflat.shape[-2]} positions"
        )
    return beta @ hflat


def batchdot_vjp(g, beta, hflat):
    dbeta = g @ np.swapaxes(hflat, -1, -2)
    dhflat = np.swapaxes(beta, -1, -2) @ g
    return dbeta, dhflat


def global_avg_pool(x):
    """Per-channel spatial mean; (n, h, w, c) -> (n, 1, 1, c)."""
    return x.mean(axis=(1, 2), keepdims=True)


def global_avg_pool_vjp(g, x):
    n, h, w, c = x.shape
    return np.broadcast_to(g / (h * w), x.shape)


def dense(x, w, b):
    """Affine map on pooled features; (n, 1, 1, c) -> (n, 1, 1, k)."""
    if x.shape[3] != w.shape[0]:
        raise ShapeError(
            f"channel axis mismatch: input has {x.shape[3]} features, "
            f"dense weights expect {w.shape[0]}"
        )
    return x @ w + b


def dense_vjp(g, x, w):
    dx = g @ w.T
    dw = x.reshape(-1, x.shape[3]).T @ g.reshape(-1, g.shape[3])
    db = g.sum(axis=(0, 1, 2))
    return dx, dw, db
