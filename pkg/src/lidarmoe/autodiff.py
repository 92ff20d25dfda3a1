"""Minimal reverse-mode differentiation engine.

Values are held in ``Var`` nodes that record their parents and a backward
closure as operations are applied, so any composition of the primitives below
is differentiable. Storage is float32; reductions (sums, means, segment
pooling, gradient accumulation) run with float64 accumulators before rounding
back, and an exact float64 mode exists for finite-difference verification.

The package-level entry points are :func:`evaluate`, :func:`backward` and
:func:`grad_check`, which run a :class:`Graph` (a named build function over
inputs and parameters) forward, backward, and against central differences.
"""

from __future__ import annotations

import zlib

import numpy as np


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes do not match the operation's contract."""


_CHECK_FINITE = True


def _finite(data: np.ndarray) -> np.ndarray:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value in intermediate tensor")
    return data


class Var:
    """One node of the recorded computation.

    ``data`` is a numpy array (float32 in normal mode, float64 in exact
    mode). Leaf nodes carry ``requires_grad`` per their role (trainable
    parameter vs. constant input); interior nodes require grad iff any
    parent does.
    """

    __slots__ = ("data", "grad", "parents", "bwd", "requires_grad")

    def __init__(self, data, parents=(), bwd=None, requires_grad=False):
        self.data = _finite(np.asarray(data))
        self.parents = parents if (requires_grad and parents) else ()
        self.bwd = bwd if (requires_grad and parents) else None
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def add_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros(self.data.shape, dtype=np.float64)
        self.grad += g


def as_var(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x))


def _out(data, parents, bwd):
    req = any(p.requires_grad for p in parents)
    return Var(data, parents=tuple(parents), bwd=bwd, requires_grad=req)


def _dtype_of(*vars_):
    for v in vars_:
        if v.data.dtype == np.float64:
            return np.float64
    return np.float32


def _reduce_sum(x, axis=None, keepdims=False):
    # float64 accumulation regardless of storage dtype
    return np.sum(x, axis=axis, keepdims=keepdims, dtype=np.float64)


def _unbroadcast(g, shape):
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_var(a), as_var(b)
    data = (a.data + b.data).astype(_dtype_of(a, b))

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _out(data, (a, b), bwd)


def sub(a, b):
    a, b = as_var(a), as_var(b)
    data = (a.data - b.data).astype(_dtype_of(a, b))

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _out(data, (a, b), bwd)


def neg(a):
    a = as_var(a)
    return _out(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_var(a), as_var(b)
    data = (a.data * b.data).astype(_dtype_of(a, b))
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _out(data, (a, b), bwd)


def div(a, b):
    a, b = as_var(a), as_var(b)
    data = (a.data / b.data).astype(_dtype_of(a, b))
    ad, bd = a.data, b.data

    def bwd(g):
        return (_unbroadcast(g / bd, ad.shape),
                _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return _out(data, (a, b), bwd)


def matmul(a, b):
    a, b = as_var(a), as_var(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul {a.data.shape} @ {b.data.shape}")
    data = (a.data @ b.data).astype(_dtype_of(a, b))
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.astype(np.float64).T, ad.astype(np.float64).T @ g

    return _out(data, (a, b), bwd)


def relu(a):
    a = as_var(a)
    mask = a.data > 0
    return _out(np.where(mask, a.data, 0).astype(a.data.dtype), (a,),
                lambda g: (g * mask,))


def softplus(a):
    """log(1 + e^x), computed stably; derivative is the logistic sigmoid."""
    a = as_var(a)
    x = a.data
    data = (np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))).astype(x.dtype)
    sig = 1.0 / (1.0 + np.exp(-x.astype(np.float64)))
    return _out(data, (a,), lambda g: (g * sig,))


def exp(a):
    a = as_var(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    d64 = data.astype(np.float64)
    return _out(data, (a,), lambda g: (g * d64,))


def log(a):
    a = as_var(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.log(a.data)
    ad = a.data.astype(np.float64)
    return _out(data, (a,), lambda g: (g / ad,))


def sqrt(a):
    a = as_var(a)
    with np.errstate(invalid="ignore"):
        data = np.sqrt(a.data)
    d64 = data.astype(np.float64)
    return _out(data, (a,), lambda g: (g / (2.0 * d64),))


def softmax_rows(a):
    """Row-wise softmax of a 2D array."""
    a = as_var(a)
    if a.data.ndim != 2:
        raise ShapeError("softmax_rows expects 2D input")
    x = a.data.astype(np.float64)
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    y64 = e / e.sum(axis=1, keepdims=True)
    data = y64.astype(a.data.dtype)

    def bwd(g):
        dot = np.sum(g * y64, axis=1, keepdims=True)
        return (y64 * (g - dot),)

    return _out(data, (a,), bwd)


def log_softmax_rows(a):
    a = as_var(a)
    if a.data.ndim != 2:
        raise ShapeError("log_softmax_rows expects 2D input")
    x = a.data.astype(np.float64)
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    y64 = shifted - lse
    data = y64.astype(a.data.dtype)
    sm = np.exp(y64)

    def bwd(g):
        return (g - sm * np.sum(g, axis=1, keepdims=True),)

    return _out(data, (a,), bwd)


def logsumexp_rows(a):
    """Row-wise log-sum-exp, shape (N, 1)."""
    a = as_var(a)
    x = a.data.astype(np.float64)
    m = x.max(axis=1, keepdims=True)
    lse64 = m + np.log(np.sum(np.exp(x - m), axis=1, keepdims=True))
    data = lse64.astype(a.data.dtype)
    sm = np.exp(x - lse64)

    def bwd(g):
        return (g * sm,)

    return _out(data, (a,), bwd)


def concat_cols(parts):
    parts = [as_var(p) for p in parts]
    rows = {p.data.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols row mismatch: {sorted(rows)}")
    data = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.data.shape[1] for p in parts]

    def bwd(g):
        grads, j = [], 0
        for w in widths:
            grads.append(g[:, j:j + w])
            j += w
        return tuple(grads)

    return _out(data, tuple(parts), bwd)


def slice_cols(a, j0, j1):
    a = as_var(a)
    data = a.data[:, j0:j1]
    shape = a.data.shape

    def bwd(g):
        full = np.zeros(shape, dtype=np.float64)
        full[:, j0:j1] = g
        return (full,)

    return _out(data, (a,), bwd)


def reshape(a, shape):
    a = as_var(a)
    orig = a.data.shape
    return _out(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a):
    a = as_var(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose expects 2D input")
    return _out(np.ascontiguousarray(a.data.T), (a,),
                lambda g: (np.ascontiguousarray(g.T),))


def gather_rows(a, idx):
    """Select rows by integer index; gradients scatter-add back."""
    a = as_var(a)
    idx = np.asarray(idx, dtype=np.int64)
    data = a.data[idx]
    shape = a.data.shape

    def bwd(g):
        full = np.zeros(shape, dtype=np.float64)
        np.add.at(full, idx, g)
        return (full,)

    return _out(data, (a,), bwd)


def take_diag(a):
    """Diagonal of a square 2D array as an (N, 1) column."""
    a = as_var(a)
    n, m = a.data.shape
    if n != m:
        raise ShapeError("take_diag expects a square matrix")
    data = np.diagonal(a.data).reshape(n, 1).copy()

    def bwd(g):
        full = np.zeros((n, n), dtype=np.float64)
        np.fill_diagonal(full, g[:, 0])
        return (full,)

    return _out(data, (a,), bwd)


def segment_mean(a, seg, num_segments):
    """Mean of rows of ``a`` per segment id; empty segments yield zero rows."""
    a = as_var(a)
    seg = np.asarray(seg, dtype=np.int64)
    n, d = a.data.shape
    if seg.shape != (n,):
        raise ShapeError("segment ids must be one per row")
    counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
    sums = np.zeros((num_segments, d), dtype=np.float64)
    np.add.at(sums, seg, a.data.astype(np.float64))
    safe = np.maximum(counts, 1.0)
    data = (sums / safe[:, None]).astype(a.data.dtype)

    def bwd(g):
        return ((g / safe[:, None])[seg],)

    return _out(data, (a,), bwd)


def segment_max(a, seg, num_segments):
    """Column-wise max of rows per segment; every segment must be non-empty.

    Gradient flows to the first (lowest-row-index) attaining element of each
    (segment, column) pair.
    """
    a = as_var(a)
    seg = np.asarray(seg, dtype=np.int64)
    n, d = a.data.shape
    counts = np.bincount(seg, minlength=num_segments)
    if np.any(counts == 0):
        raise ShapeError("segment_max requires all segments non-empty")
    out = np.full((num_segments, d), -np.inf)
    np.maximum.at(out, seg, a.data.astype(np.float64))
    data = out.astype(a.data.dtype)

    winners = np.full((num_segments, d), n, dtype=np.int64)
    rows = np.arange(n, dtype=np.int64)[:, None]
    hit = a.data.astype(np.float64) == out[seg]
    np.minimum.at(winners, seg, np.where(hit, rows, n))

    def bwd(g):
        full = np.zeros((n, d), dtype=np.float64)
        cols = np.broadcast_to(np.arange(d), winners.shape)
        np.add.at(full, (winners.ravel(), cols.ravel()), g.ravel())
        return (full,)

    return _out(data, (a,), bwd)


def sum_all(a):
    a = as_var(a)
    data = np.asarray(_reduce_sum(a.data), dtype=a.data.dtype)
    shape = a.data.shape
    return _out(data, (a,), lambda g: (np.broadcast_to(g, shape).astype(np.float64),))


def mean_all(a):
    a = as_var(a)
    n = a.data.size
    data = np.asarray(_reduce_sum(a.data) / n, dtype=a.data.dtype)
    shape = a.data.shape

    def bwd(g):
        return (np.full(shape, float(g) / n, dtype=np.float64),)

    return _out(data, (a,), bwd)


def sum_cols(a):
    """Row sums of a 2D array, shape (N, 1)."""
    a = as_var(a)
    data = _reduce_sum(a.data, axis=1, keepdims=True).astype(a.data.dtype)
    d = a.data.shape[1]

    def bwd(g):
        return (np.repeat(g, d, axis=1),)

    return _out(data, (a,), bwd)


def conv2d3x3(x, w, b):
    """3x3 same-padding convolution on an HWC image.

    ``w`` has shape (9 * C_in, C_out) with taps ordered row-major over the
    3x3 window; ``b`` has shape (C_out,). Implemented as nine shifted
    matrix products, which keeps the backward pass exact and simple.
    """
    x, w, b = as_var(x), as_var(w), as_var(b)
    if x.data.ndim != 3:
        raise ShapeError("conv2d3x3 expects an HWC image")
    h, wd, cin = x.data.shape
    if w.data.shape[0] != 9 * cin:
        raise ShapeError(f"conv2d3x3 weight rows {w.data.shape[0]} != 9*{cin}")
    cout = w.data.shape[1]
    dtype = _dtype_of(x, w, b)

    xp = np.zeros((h + 2, wd + 2, cin), dtype=x.data.dtype)
    xp[1:-1, 1:-1] = x.data
    shifts = [xp[dy:dy + h, dx:dx + wd].reshape(h * wd, cin)
              for dy in range(3) for dx in range(3)]

    acc = np.zeros((h * wd, cout), dtype=np.float64)
    for t, sh in enumerate(shifts):
        acc += sh.astype(np.float64) @ w.data[t * cin:(t + 1) * cin].astype(np.float64)
    acc += b.data.astype(np.float64)
    data = acc.reshape(h, wd, cout).astype(dtype)

    wdat = w.data.astype(np.float64)

    def bwd(g):
        gf = g.reshape(h * wd, cout)
        gxp = np.zeros((h + 2, wd + 2, cin), dtype=np.float64)
        gw = np.zeros((9 * cin, cout), dtype=np.float64)
        for t in range(9):
            dy, dx = divmod(t, 3)
            blk = wdat[t * cin:(t + 1) * cin]
            gxp[dy:dy + h, dx:dx + wd] += (gf @ blk.T).reshape(h, wd, cin)
            gw[t * cin:(t + 1) * cin] = shifts[t].astype(np.float64).T @ gf
        gb = gf.sum(axis=0, dtype=np.float64)
        return gxp[1:-1, 1:-1], gw, gb

    return _out(data, (x, w, b), bwd)


# ---------------------------------------------------------------------------
# graph execution
# ---------------------------------------------------------------------------

def _hash_tag(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


class GraphContext:
    """Execution context handed to a graph's build function.

    Exposes named inputs and parameters as :class:`Var` leaves, the
    train-mode flag, and a seeded noise source keyed by (seed, tag) so a
    given noise draw is a pure function of the run seed and its tag.
    """

    def __init__(self, inputs, params, train_mode, seed, dtype, overrides=None):
        self._inputs = inputs
        self._params = params
        self._overrides = overrides or {}
        self._vars = {}
        self.train_mode = train_mode
        self.seed = seed
        self.dtype = dtype

    def input(self, name) -> Var:
        key = ("in", name)
        if key not in self._vars:
            raw = self._inputs[name]
            arr = np.asarray(raw)
            if np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(self.dtype)
            self._vars[key] = Var(arr)
        return self._vars[key]

    def raw_input(self, name):
        """Non-tensor payloads (index arrays, labels, structures)."""
        return self._inputs[name]

    def has_input(self, name):
        return name in self._inputs

    def param(self, name) -> Var:
        key = ("p", name)
        if key not in self._vars:
            if name in self._overrides:
                value = self._overrides[name].astype(self.dtype)
            else:
                value = self._params.get(name).astype(self.dtype)
            self._vars[key] = Var(value, requires_grad=self._params.is_trainable(name))
        return self._vars[key]

    def param_vars(self):
        return {k[1]: v for k, v in self._vars.items() if k[0] == "p"}

    def randn(self, shape, tag: str) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, _hash_tag(tag)]))
        return rng.standard_normal(shape).astype(self.dtype)


class Graph:
    """A named differentiable computation over inputs and parameters.

    ``build`` is a callable ``(ctx: GraphContext) -> dict[str, Var]``
    applying the primitives above; the recorded tape is acyclic by
    construction and shapes are validated as each primitive is applied.
    """

    def __init__(self, build):
        self.build = build

    def run(self, params, inputs, train_mode=False, seed=0, dtype=np.float32,
            overrides=None):
        ctx = GraphContext(inputs, params, train_mode, seed, dtype, overrides)
        outputs = self.build(ctx)
        return ctx, outputs


def evaluate(graph, params, inputs, train_mode=False, seed=0):
    """Run a graph forward; returns named output arrays."""
    _, outputs = graph.run(params, inputs, train_mode=train_mode, seed=seed)
    return {k: v.data for k, v in outputs.items()}


def _backprop(loss_var: Var):
    topo, visited, stack = [], set(), [(loss_var, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))

    loss_var.grad = np.ones(loss_var.data.shape, dtype=np.float64)
    for node in reversed(topo):
        if node.bwd is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.bwd(node.grad)):
            if parent.requires_grad:
                parent.add_grad(g)


def backward(graph, params, inputs, loss="loss", train_mode=False, seed=0):
    """Reverse-mode gradients of a scalar output w.r.t. trainable params.

    Returns ``(outputs, grads)``; ``grads`` maps parameter name to a
    float32 array and contains entries only for trainable parameters used
    by the graph (a used-but-unaffecting parameter gets a zero array).
    """
    ctx, outputs = graph.run(params, inputs, train_mode=train_mode, seed=seed)
    loss_var = outputs[loss]
    if loss_var.data.shape != ():
        raise ShapeError("loss node must be scalar")
    _backprop(loss_var)
    grads = {}
    for name, var in ctx.param_vars().items():
        if not var.requires_grad:
            continue
        g = var.grad if var.grad is not None else np.zeros(var.data.shape)
        grads[name] = g.astype(np.float32)
    out_arrays = {k: v.data for k, v in outputs.items()}
    return out_arrays, grads


def grad_check(graph, params, inputs, loss="loss", eps=1e-3,
               train_mode=False, seed=0):
    """Max relative error of backward vs. central finite differences.

    Both the analytic and numeric sides run the same graph in float64 so
    the comparison measures the correctness of the backward formulas, not
    float32 rounding. Relative error per scalar is
    ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    ctx, outputs = graph.run(params, inputs, train_mode=train_mode,
                             seed=seed, dtype=np.float64)
    loss_var = outputs[loss]
    _backprop(loss_var)
    analytic = {}
    for name, var in ctx.param_vars().items():
        if var.requires_grad:
            g = var.grad if var.grad is not None else np.zeros(var.data.shape)
            analytic[name] = np.asarray(g, dtype=np.float64)

    def eval_loss(overrides):
        _, outs = graph.run(params, inputs, train_mode=train_mode,
                            seed=seed, dtype=np.float64, overrides=overrides)
        return float(outs[loss].data)

    worst = 0.0
    for name in sorted(analytic):
        base = params.get(name).astype(np.float64)
        flat = base.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = eval_loss({name: base})
            flat[i] = orig - eps
            lm = eval_loss({name: base})
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * eps)
            a = analytic[name].ravel()[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
