"""Reverse-mode automatic differentiation over dense float64 arrays.

A small tape-based engine covering exactly the operations the training
losses and explanation maps need: matmul, conv2d, elementwise math,
softmax, reductions, concat/reshape/transpose and mask application.
Everything runs at double precision; evaluation is a pure function of
the inputs, parameters and masks, so repeated calls are bit-identical.
"""

import numpy as np

EPS_LOG = 1e-12


class ShapeError(ValueError):
    """Operands of an operation have inconsistent shapes."""


class Tensor:
    """Node of the compute tape: an ndarray plus backprop bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), op=op)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    # inverse of numpy broadcasting: sum gradient down to the operand shape
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.data.shape} vs {b.data.shape}") from e

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward, "add")


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: {a.data.shape} vs {b.data.shape}") from e

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward, "sub")


def mul(a, b):
    """Elementwise product; also serves as dropout-mask application."""
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: {a.data.shape} vs {b.data.shape}") from e

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward, "mul")


def neg(a):
    a = _wrap(a)

    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward, "neg")


def relu(a):
    a = _wrap(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        _accum(a, g * (a.data > 0.0))

    return _make(data, (a,), backward, "relu")


def sigmoid(a):
    a = _wrap(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        _accum(a, g * data * (1.0 - data))

    return _make(data, (a,), backward, "sigmoid")


def exp(a):
    a = _wrap(a)
    data = np.exp(a.data)

    def backward(g):
        _accum(a, g * data)

    return _make(data, (a,), backward, "exp")


def log(a):
    """Guarded log: log(max(x, 1e-12)); zero gradient below the floor."""
    a = _wrap(a)
    clipped = np.maximum(a.data, EPS_LOG)
    data = np.log(clipped)

    def backward(g):
        _accum(a, np.where(a.data >= EPS_LOG, g / clipped, 0.0))

    return _make(data, (a,), backward, "log")


def clamp(a, lo, hi):
    a = _wrap(a)
    data = np.clip(a.data, lo, hi)

    def backward(g):
        _accum(a, g * ((a.data >= lo) & (a.data <= hi)))

    return _make(data, (a,), backward, "clamp")


def square(a):
    a = _wrap(a)

    def backward(g):
        _accum(a, g * 2.0 * a.data)

    return _make(a.data * a.data, (a,), backward, "square")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    """Matrix product, broadcasting over leading batch dimensions."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, "
                         f"got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), backward, "matmul")


def conv2d(x, w, b=None):
    """Same-size 2-D convolution, stride 1, zero padding.

    x: (N, H, W, Cin), w: (kh, kw, Cin, Cout) with odd kh/kw, b: (Cout,).
    The spatial loop runs over the kh*kw kernel taps so every tap is one
    BLAS matmul; both forward and backward stay off the Python hot path.
    """
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: x {x.data.shape}, w {w.data.shape}")
    n, h, wid, cin = x.data.shape
    kh, kw, wcin, cout = w.data.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be odd-sized, got {kh}x{kw}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    # all-zero taps contribute nothing; skipping them makes sparse fixed
    # kernels (blur, ring) cost what they touch, not kernel area
    live = [(i, j) for i in range(kh) for j in range(kw) if w.data[i, j].any()]
    data = np.zeros((n, h, wid, cout))
    for i, j in live:
        data += np.matmul(xp[:, i:i + h, j:j + wid, :], w.data[i, j])
    parents = [x, w]
    if b is not None:
        b = _wrap(b)
        if b.data.shape != (cout,):
            raise ShapeError(f"conv2d: bias {b.data.shape}, expected ({cout},)")
        data += b.data
        parents.append(b)

    def backward(g):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i, j in live:
                gxp[:, i:i + h, j:j + wid, :] += np.matmul(g, w.data[i, j].T)
            _accum(x, gxp[:, ph:ph + h, pw:pw + wid, :])
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    gw[i, j] = np.tensordot(xp[:, i:i + h, j:j + wid, :], g,
                                            axes=([0, 1, 2], [0, 1, 2]))
            _accum(w, gw)
        if b is not None:
            _accum(b, g.sum(axis=(0, 1, 2)))

    return _make(data, parents, backward, "conv2d")


def avg_pool2(x):
    """2x2 non-overlapping average pool on (N, H, W, C); H and W even."""
    x = _wrap(x)
    n, h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: spatial dims must be even, got {h}x{w}")
    data = x.data.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def backward(g):
        gx = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        _accum(x, gx)

    return _make(data, (x,), backward, "avg_pool2")


def max_pool2(x):
    """2x2 non-overlapping max pool on (N, H, W, C); H and W even.

    Gradient is split equally among window elements attaining the max."""
    x = _wrap(x)
    n, h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2: spatial dims must be even, got {h}x{w}")
    windows = x.data.reshape(n, h // 2, 2, w // 2, 2, c)
    data = windows.max(axis=(2, 4))

    def backward(g):
        hit = windows == data[:, :, None, :, None, :]
        share = hit / hit.sum(axis=(2, 4), keepdims=True)
        gx = g[:, :, None, :, None, :] * share
        _accum(x, gx.reshape(n, h, w, c))

    return _make(data, (x,), backward, "max_pool2")


def min_last(x):
    """Minimum over the last axis, keepdims: (..., K) -> (..., 1).

    Gradient is split equally among elements attaining the minimum."""
    x = _wrap(x)
    data = x.data.min(axis=-1, keepdims=True)

    def backward(g):
        hit = x.data == data
        share = hit / hit.sum(axis=-1, keepdims=True)
        _accum(x, g * share)

    return _make(data, (x,), backward, "min_last")


def max_pool_global(x):
    """Max over the spatial dims: (N, H, W, C) -> (N, C).

    Gradient flows to every element attaining the maximum (split equally on
    exact ties)."""
    x = _wrap(x)
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool_global: need (N,H,W,C), got {x.data.shape}")
    data = x.data.max(axis=(1, 2))

    def backward(g):
        hit = x.data == data[:, None, None, :]
        share = hit / hit.sum(axis=(1, 2), keepdims=True)
        _accum(x, g[:, None, None, :] * share)

    return _make(data, (x,), backward, "max_pool_global")


# ---------------------------------------------------------------------------
# softmax and reductions

def softmax(a, axis=-1):
    a = _wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - dot))

    return _make(data, (a,), backward, "softmax")


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)])

    def backward(g):
        gg = np.asarray(g)
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape) / count)

    return _make(data, (a,), backward, "mean")


def sumt(a, axis=None, keepdims=False):
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = np.asarray(g)
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(data, (a,), backward, "sum")


def concat(parts, axis=0):
    parts = [_wrap(p) for p in parts]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[p.data.shape for p in parts]}") from e
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g):
        offs = np.cumsum([0] + sizes)
        for p, lo, hi in zip(parts, offs[:-1], offs[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    return _make(data, parts, backward, "concat")


def reshape(a, shape):
    a = _wrap(a)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a, axes):
    a = _wrap(a)
    inv = np.argsort(axes)

    def backward(g):
        _accum(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward, "transpose")


# ---------------------------------------------------------------------------
# backward driver

def backward(loss):
    """Backpropagate from a scalar loss, filling .grad on reachable nodes."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    topo, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# named-parameter graphs

class ComputeGraph:
    """A function graph with named parameters.

    `build(params, inputs)` maps dicts of Tensors to a dict of named
    output Tensors; the tape recorded while it runs is the node list.
    Parameters are owned as plain float64 arrays and may be updated in
    place between evaluations.
    """

    def __init__(self, build, parameters):
        self.build = build
        self.parameters = {k: np.asarray(v, dtype=np.float64)
                           for k, v in parameters.items()}

    def _run(self, inputs, requires_grad):
        params = {k: Tensor(v, requires_grad=requires_grad, op=f"param:{k}")
                  for k, v in self.parameters.items()}
        ins = {k: _wrap(v) for k, v in inputs.items()}
        outs = self.build(params, ins)
        return params, outs


def evaluate(graph, inputs):
    """Run the graph; returns {output name: ndarray}. Pure and deterministic."""
    _, outs = graph._run(inputs, requires_grad=False)
    return {k: v.data for k, v in outs.items()}


def gradients(graph, inputs, loss="loss", activations=()):
    """Gradients of the scalar `loss` output w.r.t. every parameter.

    Also returns gradients w.r.t. the named intermediate outputs listed
    in `activations` (present in the build's output dict), which is how
    class-activation maps get their d(logit)/d(feature-map) terms.
    """
    params, outs = graph._run(inputs, requires_grad=True)
    if loss not in outs:
        raise KeyError(f"graph has no output named {loss!r}")
    node = outs[loss]
    if node.data.size != 1:
        raise ShapeError(f"gradients: output {loss!r} is not scalar "
                         f"(shape {node.data.shape})")
    backward(node)
    param_grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                   for k, t in params.items()}
    act_grads = {}
    for name in activations:
        t = outs[name]
        act_grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return param_grads, act_grads


def finite_difference_check(graph, inputs, epsilon=1e-4, loss="loss",
                            max_elements=0, seed=0):
    """Max over parameter elements of |analytic - numeric| / max(1, |numeric|).

    Central differences with step `epsilon` on every parameter entry.
    Intended for small verification graphs; cost is two evaluations per
    parameter element. `max_elements` > 0 checks only that many elements,
    drawn uniformly (seeded) across all parameters, which keeps large
    graphs affordable.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    analytic, _ = gradients(graph, inputs, loss=loss)

    def loss_value():
        return float(evaluate(graph, inputs)[loss])

    entries = [(name, i) for name, arr in graph.parameters.items()
               for i in range(arr.size)]
    if max_elements and len(entries) > max_elements:
        rng = np.random.default_rng(np.random.SeedSequence([seed, len(entries)]))
        picks = rng.choice(len(entries), size=max_elements, replace=False)
        entries = [entries[i] for i in picks]

    worst = 0.0
    for name, i in entries:
        flat = graph.parameters[name].reshape(-1)
        ga = analytic[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + epsilon
        up = loss_value()
        flat[i] = orig - epsilon
        down = loss_value()
        flat[i] = orig
        numeric = (up - down) / (2.0 * epsilon)
        err = abs(ga[i] - numeric) / max(1.0, abs(numeric))
        if err > worst:
            worst = err
    return worst
