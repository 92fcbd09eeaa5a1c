"""Reverse-mode differentiation over the tensor primitives.

A :class:`Tape` records one forward pass as a flat list of nodes; recording
order is already topological, so the backward sweep is a single reverse
iteration with additive gradient accumulation. Tapes are cheap throwaway
objects: one per training step, freed afterwards.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError, StateError


class Parameter:
    """A named weight tensor with its gradient slot and trainable flag."""

    __slots__ = ("name", "value", "grad", "trainable")

    def __init__(self, name, value, trainable=True):
        self.name = name
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable

    def __repr__(self):
        flag = "" if self.trainable else ", frozen"
        return f"Parameter({self.name}, shape={self.value.shape}{flag})"


class Var:
    """One recorded value in a tape.

    ``needs`` marks whether any trainable parameter sits upstream; backward
    prunes everything else, so a frozen backbone costs nothing to train
    through.
    """

    __slots__ = ("tape", "index", "value", "needs")

    def __init__(self, tape, index, value, needs):
        self.tape = tape
        self.index = index
        self.value = value
        self.needs = needs

    @property
    def shape(self):
        return self.value.shape


class Tape:
    def __init__(self):
        self._parents = []  # per node: tuple of parent indices
        self._vjps = []  # per node: callable(upstream) -> tuple of parent grads
        self._param_vars = {}  # id(Parameter) -> Var, so shared weights share a leaf
        self._bound = []  # Parameters in bind order
        self._consumed = False

    def _record(self, value, parents=(), vjp=None):
        self._parents.append(tuple(p.index for p in parents))
        self._vjps.append(vjp)
        needs = any(p.needs for p in parents)
        return Var(self, len(self._parents) - 1, value, needs)

    def constant(self, value, needs=False):
        """A leaf holding an input or other non-parameter array."""
        self._parents.append(())
        self._vjps.append(None)
        return Var(self, len(self._parents) - 1, np.asarray(value), needs)

    def bind(self, p: Parameter):
        """Leaf for a Parameter; binding twice returns the same node."""
        var = self._param_vars.get(id(p))
        if var is None:
            self._parents.append(())
            self._vjps.append(None)
            var = Var(self, len(self._parents) - 1, p.value, p.trainable)
            self._param_vars[id(p)] = var
            self._bound.append(p)
        return var

    def bound_params(self):
        return list(self._bound)

    def release(self):
        """Drop the recorded closures (and the arrays they capture).

        The vjp closures reference their input Vars, which reference the
        tape: a cycle only the garbage collector would reclaim. Releasing
        eagerly keeps big intermediate activations from piling up across
        steps.
        """
        self._vjps = []


def _same_tape(*vars_):
    tape = vars_[0].tape
    for v in vars_[1:]:
        if v.tape is not tape:
            raise StateError("operands were recorded on different tapes")
    return tape


def backward(out: Var, loss_grad=None):
    """Reverse sweep from ``out``; returns {name: grad} over bound parameters.

    Frozen parameters get zero gradients. Gradients are also written into
    each Parameter's ``grad`` slot. A tape can only be swept once.
    """
    tape = out.tape
    if tape._consumed:
        raise StateError("backward already ran on this tape")
    if not tape._parents:
        raise StateError("backward called before any forward computation")
    tape._consumed = True

    if loss_grad is None:
        loss_grad = np.ones_like(out.value)
    loss_grad = np.asarray(loss_grad)
    if loss_grad.shape != out.value.shape:
        raise ShapeError(
            f"loss gradient shape {loss_grad.shape} does not match output {out.value.shape}"
        )

    grads = [None] * (out.index + 1)
    grads[out.index] = loss_grad
    for i in range(out.index, -1, -1):
        g = grads[i]
        if g is None or not tape._parents[i]:
            continue
        parent_grads = tape._vjps[i](g)
        grads[i] = None  # free the upstream grad and closure as soon as done
        tape._vjps[i] = None
        for j, pg in zip(tape._parents[i], parent_grads):
            if pg is None:
                continue
            grads[j] = pg if grads[j] is None else grads[j] + pg

    table = {}
    for p in tape._bound:
        idx = tape._param_vars[id(p)].index
        g = grads[idx] if idx <= out.index else None
        if not p.trainable or g is None:
            g = np.zeros_like(p.value)
        g = np.ascontiguousarray(g, dtype=p.value.dtype)
        p.grad = g
        table[p.name] = g
    tape.release()
    return table


# ---------------------------------------------------------------------------
# Taped primitives. Each wraps an ops forward with the matching vjp closure.
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    """Sum g down to ``shape`` along the axes broadcasting expanded."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Var, b: Var):
    tape = _same_tape(a, b)
    ash, bsh = a.value.shape, b.value.shape

    def vjp(g):
        return (
            _unbroadcast(g, ash) if a.needs else None,
            _unbroadcast(g, bsh) if b.needs else None,
        )

    return tape._record(a.value + b.value, (a, b), vjp)


def mul(a: Var, b: Var):
    tape = _same_tape(a, b)
    av, bv = a.value, b.value

    def vjp(g):
        return (
            _unbroadcast(g * bv, av.shape) if a.needs else None,
            _unbroadcast(g * av, bv.shape) if b.needs else None,
        )

    return tape._record(av * bv, (a, b), vjp)


def reshape(x: Var, shape):
    old = x.value.shape
    return x.tape._record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose_last2(x: Var):
    return x.tape._record(
        np.swapaxes(x.value, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),)
    )


def concat_channels(a: Var, b: Var):
    tape = _same_tape(a, b)
    split = a.value.shape[-1]
    return tape._record(
        np.concatenate([a.value, b.value], axis=-1),
        (a, b),
        lambda g: (g[..., :split], g[..., split:]),
    )


def conv1x1(x: Var, w: Var, b: Var | None = None, stride=1):
    tape = _same_tape(x, w) if b is None else _same_tape(x, w, b)
    y = ops.conv1x1(x.value, w.value, None if b is None else b.value, stride)

    def vjp(g):
        dx = ops.conv1x1_vjp_x(g, x.value.shape, w.value, stride) if x.needs else None
        dw = ops.conv1x1_vjp_w(g, x.value, stride) if w.needs else None
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 1, 2)) if b.needs else None

    return tape._record(y, (x, w) if b is None else (x, w, b), vjp)


def depthwise3x3(x: Var, k: Var, stride=1):
    tape = _same_tape(x, k)
    y = ops.depthwise3x3(x.value, k.value, stride)

    def vjp(g):
        return ops.depthwise3x3_vjp(g, x.value, k.value, stride, need_x=x.needs, need_k=k.needs)

    return tape._record(y, (x, k), vjp)


def batch_norm_train(x: Var, gamma: Var, beta: Var, eps):
    """Batch-statistics normalization; returns (output, batch_mean, batch_var)."""
    tape = _same_tape(x, gamma, beta)
    y, mean, var, cache = ops.batch_norm_train(x.value, gamma.value, beta.value, eps)
    out = tape._record(y, (x, gamma, beta), lambda g: ops.batch_norm_train_vjp(g, gamma.value, cache))
    return out, mean, var


def batch_norm_infer(x: Var, gamma: Var, beta: Var, moving_mean, moving_var, eps):
    tape = _same_tape(x, gamma, beta)
    p = ops.BatchNormParams(gamma.value, beta.value, moving_mean, moving_var, eps)
    y = ops.batch_norm_infer(x.value, p)
    return tape._record(y, (x, gamma, beta), lambda g: ops.batch_norm_infer_vjp(g, x.value, p))


def _elementwise(x: Var, fwd, vjp, use_output=False):
    y = fwd(x.value)
    ref = y if use_output else x.value
    return x.tape._record(y, (x,), lambda g: (vjp(g, ref),))


def relu(x: Var):
    return _elementwise(x, ops.relu, ops.relu_vjp)


def relu6(x: Var):
    return _elementwise(x, ops.relu6, ops.relu6_vjp)


def h_swish(x: Var):
    return _elementwise(x, ops.h_swish, ops.h_swish_vjp)


def hard_sigmoid(x: Var):
    return _elementwise(x, ops.hard_sigmoid, ops.hard_sigmoid_vjp)


def sigmoid(x: Var):
    return _elementwise(x, ops.sigmoid, ops.sigmoid_vjp, use_output=True)


def softmax_rows(x: Var):
    return _elementwise(x, ops.softmax_rows, ops.softmax_rows_vjp, use_output=True)


def batchdot(beta: Var, hflat: Var):
    tape = _same_tape(beta, hflat)
    y = ops.batchdot(beta.value, hflat.value)

    def vjp(g):
        dbeta = g @ np.swapaxes(hflat.value, -1, -2) if beta.needs else None
        dh = np.swapaxes(beta.value, -1, -2) @ g if hflat.needs else None
        return dbeta, dh

    return tape._record(y, (beta, hflat), vjp)


def attention_mix(gx: Var, fx: Var, hx: Var):
    """Fused batchdot(softmax_rows(gx @ fx^T), hx); returns (Var, attention map)."""
    tape = _same_tape(gx, fx, hx)
    y, beta = ops.attention_mix(gx.value, fx.value, hx.value)

    def vjp(g):
        return ops.attention_mix_vjp(g, beta, gx.value, fx.value, hx.value)

    return tape._record(y, (gx, fx, hx), vjp), beta


def global_avg_pool(x: Var):
    return x.tape._record(
        ops.global_avg_pool(x.value), (x,), lambda g: (ops.global_avg_pool_vjp(g, x.value),)
    )


def dense(x: Var, w: Var, b: Var):
    tape = _same_tape(x, w, b)
    y = ops.dense(x.value, w.value, b.value)

    def vjp(g):
        dx = g @ w.value.T if x.needs else None
        dw = x.value.reshape(-1, x.value.shape[3]).T @ g.reshape(-1, g.shape[3]) if w.needs else None
        db = g.sum(axis=(0, 1, 2)) if b.needs else None
        return dx, dw, db

    return tape._record(y, (x, w, b), vjp)


def bce_with_logits(logits: Var, labels):
    """Mean binary cross-entropy on sigmoid logits; labels in {0, 1}.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the log, so a
    perfectly confident correct prediction bottoms out near 1e-7 nats.
    """
    y = np.asarray(labels, dtype=logits.value.dtype).reshape(logits.value.shape)
    p = ops.sigmoid(logits.value)
    pc = np.clip(p, 1e-7, 1 - 1e-7)
    loss = -(y * np.log(pc) + (1 - y) * np.log(1 - pc)).mean()
    n = y.size

    def vjp(g):
        return (g * (p - y) / n,)

    return logits.tape._record(np.asarray(loss), (logits,), vjp)


def weighted_sum(x: Var, weights):
    """Scalar projection sum(w * x); the reduction used by gradient checks."""
    w = np.asarray(weights)
    return x.tape._record(np.asarray((w * x.value).sum()), (x,), lambda g: (g * w,))


def finite_diff_check(build, eps=1e-5, max_coords=200, seed=0):
    """Compare analytic gradients against central finite differences.

    ``build`` must construct a fresh graph and return its output Var each
    call; the trainable parameters it binds are perturbed in place. Works in
    float64 only. Returns the max relative error over checked coordinates,
    with denominator max(|analytic|, |numeric|, 1e-8).

    Central differences cannot resolve derivatives below roughly
    |objective| * machine-eps / eps; coordinates where both sides sit under
    that floor (e.g. parameters the graph provably cancels, like a bias
    feeding a shift-invariant softmax) count as exact agreement rather than
    amplified rounding noise.
    """
    out = build()
    params = [p for p in out.tape.bound_params() if p.trainable]
    for p in params:
        if p.value.dtype != np.float64:
            raise ConfigError(f"finite_diff_check requires float64 parameters, {p.name} is {p.value.dtype}")
    if not params:
        return 0.0

    rng = np.random.default_rng(seed)
    weights = rng.standard_normal(out.value.shape)
    analytic = backward(weighted_sum(out, weights))

    coords = [(p, i) for p in params for i in range(p.value.size)]
    if len(coords) > max_coords:
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in picks]

    def objective():
        return float((weights * build().value).sum())

    noise_floor = 100 * np.finfo(np.float64).eps * max(1.0, abs(objective())) / eps
    max_rel = 0.0
    for p, i in coords:
        orig = p.value.flat[i]
        p.value.flat[i] = orig + eps
        f_plus = objective()
        p.value.flat[i] = orig - eps
        f_minus = objective()
        p.value.flat[i] = orig
        numeric = (f_plus - f_minus) / (2 * eps)
        exact = analytic[p.name].flat[i]
        if abs(exact) <= noise_floor and abs(numeric) <= noise_floor:
            continue
        rel = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
        max_rel = max(max_rel, rel)
    return max_rel
