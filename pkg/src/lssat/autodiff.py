"""Dense float64 tensors with reverse-mode automatic differentiation.

A deliberately small op set, just enough to train a transformer
encoder/decoder: elementwise arithmetic, matmul, transpose/reshape,
token gather/scatter, softmax, layer-norm, gelu, log, and two
reductions. Everything is float64 and single-threaded; gradient
checking, not speed, is the design driver.

Broadcasting is restricted to leading-batch expansion: two operands of
an elementwise op must have equal shapes, or one shape must be a
trailing suffix of the other (e.g. (B,S,D) + (D,)). Anything else is a
shape error.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

LAYER_NORM_EPS = 1e-6

# When True, every primitive asserts its output is finite. Slows things
# down; enabled by tests and by the training loop's paranoia mode.
check_finite = False


class ShapeMismatchError(ValueError):
    pass


class GraphError(ValueError):
    """Non-scalar loss, detached tensors, unknown primitives."""


class Tensor:
    """Immutable-by-convention dense array: shape + contiguous float64 data.

    ``requires_grad`` marks trainable leaves (parameters). Tensors
    produced by primitives carry a ``node`` linking them to the graph
    they were recorded on; they are not leaves themselves.
    """

    __slots__ = ("array", "requires_grad", "node")

    def __init__(self, array, requires_grad: bool = False):
        # asarray with order="C" keeps 0-d shapes (ascontiguousarray would not)
        self.array = np.asarray(array, dtype=np.float64, order="C")
        self.requires_grad = requires_grad
        self.node = None

    @property
    def shape(self):
        return self.array.shape

    @property
    def ndim(self):
        return self.array.ndim

    @property
    def size(self):
        return self.array.size

    @property
    def data(self):
        # row-major float64 view of the values
        return self.array

    def item(self) -> float:
        return float(self.array)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    """One recorded primitive application.

    ``refs`` holds, per input, either the parent Node, the leaf Tensor
    (when the input is a requires_grad leaf), or None for constants.
    ``grad_fn(g)`` maps the output cotangent to per-input cotangents
    aligned with ``refs``.
    """

    __slots__ = ("op", "refs", "grad_fn", "index", "graph")

    def __init__(self, op, refs, grad_fn, index, graph):
        self.op = op
        self.refs = refs
        self.grad_fn = grad_fn
        self.index = index
        self.graph = graph


class ComputeGraph:
    """Ordered record of primitive applications (creation order = topo order).

    Use as a context manager around a forward pass; primitives record
    onto the innermost active graph whenever an input requires grad.
    Outside any graph, forwards run without recording (eval mode).
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _graph_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _graph_stack.pop()
        assert popped is self
        return False


_graph_stack: list[ComputeGraph] = []


def _active_graph():
    return _graph_stack[-1] if _graph_stack else None


def _ref_for(t: Tensor, graph):
    """What backward should credit for this input on the active graph."""
    if t.node is not None and t.node.graph is graph:
        return t.node
    if t.requires_grad:
        return t
    return None


def _emit(op: str, out_array, inputs, grad_fn) -> Tensor:
    if check_finite and not np.all(np.isfinite(out_array)):
        raise FloatingPointError(f"{op}: non-finite values in forward output")
    out = Tensor(out_array)
    graph = _active_graph()
    if graph is None:
        return out
    refs = tuple(_ref_for(t, graph) for t in inputs)
    if all(r is None for r in refs):
        return out
    node = Node(op, refs, grad_fn, len(graph.nodes), graph)
    graph.nodes.append(node)
    out.node = node
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic (equal shapes or trailing-suffix broadcast)

def _check_broadcast(op, sa, sb):
    if sa == sb:
        return
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeMismatchError(f"{op}: shapes {sa} and {sb} neither match nor "
                             "differ only by leading batch dims")


def _reduce_to(g, shape):
    """Sum a broadcast cotangent back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return (_reduce_to(g, sa), _reduce_to(g, sb))

    return _emit("add", a.array + b.array, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return (_reduce_to(g, sa), _reduce_to(-g, sb))

    return _emit("sub", a.array - b.array, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.shape, b.shape)
    aa, ba = a.array, b.array
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return (_reduce_to(g * ba, sa), _reduce_to(g * aa, sb))

    return _emit("mul", aa * ba, (a, b), grad_fn)


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def grad_fn(g):
        return (g * c,)

    return _emit("scalar-mul", a.array * c, (a,), grad_fn)


# ---------------------------------------------------------------------------
# linear algebra and layout

def matmul(a, b) -> Tensor:
    """Matrix product: both operands batched identically, or a batched
    left operand against a shared 2-D right operand (weight matrices)."""
    a, b = as_tensor(a), as_tensor(b)
    aa, ba = a.array, b.array
    if aa.ndim < 2 or ba.ndim < 2:
        raise ShapeMismatchError(f"matmul: shapes {a.shape} and {b.shape} must "
                                 "be at least 2-D")
    if aa.shape[-1] != ba.shape[-2]:
        raise ShapeMismatchError(f"matmul: shapes {a.shape} and {b.shape} do "
                                 "not contract")
    shared_rhs = ba.ndim == 2 and aa.ndim > 2
    if not shared_rhs and aa.shape[:-2] != ba.shape[:-2]:
        raise ShapeMismatchError(f"matmul: batch dims of {a.shape} and "
                                 f"{b.shape} differ")

    def grad_fn(g):
        ga = np.matmul(g, ba.swapaxes(-1, -2))
        if shared_rhs:
            k, m = ba.shape
            gb = aa.reshape(-1, k).T @ g.reshape(-1, m)
        else:
            gb = np.matmul(aa.swapaxes(-1, -2), g)
        return (ga, gb)

    return _emit("matmul", np.matmul(aa, ba), (a, b), grad_fn)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatchError(f"transpose: axes {axes} not a permutation "
                                 f"for shape {a.shape}")
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.transpose(g, inverse),)

    return _emit("transpose", np.transpose(a.array, axes), (a,), grad_fn)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if math.prod(shape) != a.size:
        raise ShapeMismatchError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape

    def grad_fn(g):
        return (g.reshape(old),)

    return _emit("reshape", a.array.reshape(shape), (a,), grad_fn)


def index_gather(a, idx) -> Tensor:
    """Gather token rows: a is (S, D) shared or (B, S, D) per-sample,
    idx is (B, K) ints; output is (B, K, D). Adjoint of index_scatter."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    if idx.ndim != 2 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeMismatchError(f"index-gather: idx must be 2-D integer, got "
                                 f"{idx.shape} {idx.dtype}")
    aa = a.array
    if aa.ndim == 2:
        s, d = aa.shape
        if idx.size and (idx.min() < 0 or idx.max() >= s):
            raise ShapeMismatchError(f"index-gather: idx out of range for {a.shape}")
        out = aa[idx]

        def grad_fn(g):
            ga = np.zeros_like(aa)
            np.add.at(ga, idx.reshape(-1), g.reshape(-1, d))
            return (ga,)

    elif aa.ndim == 3:
        b, s, d = aa.shape
        if idx.shape[0] != b:
            raise ShapeMismatchError(f"index-gather: batch {idx.shape[0]} vs "
                                     f"{a.shape}")
        if idx.size and (idx.min() < 0 or idx.max() >= s):
            raise ShapeMismatchError(f"index-gather: idx out of range for {a.shape}")
        out = np.take_along_axis(aa, idx[:, :, None], axis=1)
        rows = np.arange(b)[:, None]

        def grad_fn(g):
            ga = np.zeros_like(aa)
            np.add.at(ga, (rows, idx), g)
            return (ga,)

    else:
        raise ShapeMismatchError(f"index-gather: input must be 2-D or 3-D, got "
                                 f"{a.shape}")
    return _emit("index-gather", out, (a,), grad_fn)


def index_scatter(a, idx, length: int) -> Tensor:
    """Scatter token rows (B, K, D) to (B, length, D) at per-row unique
    positions idx (B, K); unfilled rows are zero. Adjoint of index_gather."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    aa = a.array
    if aa.ndim != 3 or idx.shape != aa.shape[:2]:
        raise ShapeMismatchError(f"index-scatter: tokens {a.shape} vs idx "
                                 f"{idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= length):
        raise ShapeMismatchError(f"index-scatter: idx out of range for length "
                                 f"{length}")
    b, k, d = aa.shape
    sorted_idx = np.sort(idx, axis=1)
    if k > 1 and np.any(sorted_idx[:, 1:] == sorted_idx[:, :-1]):
        raise ShapeMismatchError("index-scatter: duplicate positions in a row")
    out = np.zeros((b, length, d))
    rows = np.arange(b)[:, None]
    out[rows, idx] = aa

    def grad_fn(g):
        return (np.take_along_axis(g, idx[:, :, None], axis=1),)

    return _emit("index-scatter", out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# nonlinearities and normalization

def softmax(a) -> Tensor:
    """Numerically-stable softmax along the last axis."""
    a = as_tensor(a)
    shifted = a.array - a.array.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return ((g - inner) * out,)

    return _emit("softmax", out, (a,), grad_fn)


def layer_norm(a, scale, shift) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply
    learnable per-feature scale and shift. Epsilon fixed at 1e-6."""
    a, scale, shift = as_tensor(a), as_tensor(scale), as_tensor(shift)
    d = a.shape[-1]
    if scale.shape != (d,) or shift.shape != (d,):
        raise ShapeMismatchError(f"layer-norm: scale {scale.shape} / shift "
                                 f"{shift.shape} must be ({d},)")
    aa = a.array
    mu = aa.mean(axis=-1, keepdims=True)
    centered = aa - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * inv
    sarr = scale.array

    def grad_fn(g):
        gx = g * sarr
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        ga = inv * (gx - m1 - xhat * m2)
        gscale = (g * xhat).reshape(-1, d).sum(axis=0)
        gshift = g.reshape(-1, d).sum(axis=0)
        return (ga, gscale, gshift)

    return _emit("layer-norm", xhat * sarr + shift.array, (a, scale, shift),
                 grad_fn)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact gelu, x * Phi(x), with the Gauss error function (no tanh
    approximation, so finite-difference tolerances stay tight)."""
    a = as_tensor(a)
    aa = a.array
    cdf = 0.5 * (1.0 + erf(aa * _INV_SQRT2))

    def grad_fn(g):
        pdf = np.exp(-0.5 * aa * aa) * _INV_SQRT2PI
        return (g * (cdf + aa * pdf),)

    return _emit("gelu", aa * cdf, (a,), grad_fn)


def log(a) -> Tensor:
    """Elementwise natural log (inputs must be positive)."""
    a = as_tensor(a)
    aa = a.array

    def grad_fn(g):
        return (g / aa,)

    return _emit("log", np.log(aa), (a,), grad_fn)


# ---------------------------------------------------------------------------
# reductions

def mean(a, axis=None) -> Tensor:
    """Mean over every element (axis=None, scalar output) or one axis."""
    a = as_tensor(a)
    aa = a.array
    if axis is None:
        n = aa.size
        shape = aa.shape

        def grad_fn(g):
            return (np.full(shape, float(g) / n),)

        return _emit("mean", np.asarray(aa.mean()), (a,), grad_fn)
    ax = axis if axis >= 0 else aa.ndim + axis
    n = aa.shape[ax]

    def grad_fn(g):
        return (np.repeat(np.expand_dims(g / n, ax), n, axis=ax),)

    return _emit("mean", aa.mean(axis=ax), (a,), grad_fn)


def sum_of_squares(a) -> Tensor:
    """Scalar sum of squared entries."""
    a = as_tensor(a)
    flat = a.array.ravel()

    def grad_fn(g):
        return (2.0 * float(g) * a.array,)

    return _emit("sum-of-squares", np.asarray(flat @ flat), (a,), grad_fn)


# ---------------------------------------------------------------------------
# dispatch, backward, gradient checking

_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar-mul": scalar_mul,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "index-gather": index_gather,
    "index-scatter": index_scatter,
    "softmax": softmax,
    "layer-norm": layer_norm,
    "gelu": gelu,
    "log": log,
    "mean": mean,
    "sum-of-squares": sum_of_squares,
}


def apply_primitive(op: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = _PRIMITIVES[op]
    except KeyError:
        raise GraphError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


def backward(graph: ComputeGraph, loss: Tensor) -> dict[Tensor, Tensor]:
    """Run reverse-mode accumulation from a scalar loss recorded on
    ``graph``. Returns the gradient for every requires_grad leaf that the
    loss depends on, keyed by the leaf Tensor, shaped like it.

    Pure in the graph: calling twice yields identical gradients.
    """
    if loss.shape != ():
        raise GraphError(f"backward: loss must be scalar, got shape "
                         f"{loss.shape}")
    node = loss.node
    if node is None or node.graph is not graph:
        raise GraphError("backward: loss is not attached to this graph")
    node_grads: dict[int, np.ndarray] = {node.index: np.ones(())}
    param_grads: dict[int, np.ndarray] = {}
    params: dict[int, Tensor] = {}
    for n in reversed(graph.nodes[:node.index + 1]):
        g = node_grads.pop(n.index, None)
        if g is None:
            continue
        for ref, contrib in zip(n.refs, n.grad_fn(g)):
            if ref is None:
                continue
            if isinstance(ref, Node):
                acc = node_grads.get(ref.index)
                node_grads[ref.index] = contrib if acc is None else acc + contrib
            else:
                key = id(ref)
                params.setdefault(key, ref)
                acc = param_grads.get(key)
                param_grads[key] = contrib if acc is None else acc + contrib
    return {params[k]: Tensor(g) for k, g in param_grads.items()}


def finite_difference_check(f, p: Tensor, step: float = 1e-5,
                            coords=None) -> float:
    """Max relative error between the analytic gradient of scalar f(p)
    and central finite differences.

    Per coordinate: |analytic - numeric| / (|analytic| + |numeric| + 1e-12),
    with NaN reported as inf. ``coords`` restricts the sweep to a subset
    of flat coordinate indices (default: all of them).
    """
    base = p.array.copy()
    leaf = Tensor(base, requires_grad=True)
    with ComputeGraph() as graph:
        out = f(leaf)
    if out.node is None:
        # f is constant with respect to everything; analytic gradient is zero
        analytic = np.zeros(base.size)
    else:
        grads = backward(graph, out)
        analytic = grads[leaf].array.ravel() if leaf in grads \
            else np.zeros(base.size)
    if coords is None:
        coords = range(base.size)
    worst = 0.0
    flat = base.ravel()
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(f(Tensor(base)).array)
        flat[i] = orig - step
        f_minus = float(f(Tensor(base)).array)
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        err = abs(analytic[i] - numeric) / (abs(analytic[i]) + abs(numeric)
                                            + 1e-12)
        if math.isnan(err):
            err = math.inf
        worst = max(worst, err)
    return worst
