"""Dense tensors with reverse-mode automatic differentiation.

The op set is deliberately small: exactly what a toy pre-norm Transformer
with two task heads needs (matmul, elementwise arithmetic, softmax, layer
norm, GELU, softplus, reshape/transpose/concat/slice, reductions, cross
entropy). Values live in numpy arrays; float32 is the training dtype and
reductions accumulate in float64 before casting back. Wrap a forward pass
in a ``Graph`` context to record it; ``backward`` replays the tape once and
populates ``.grad`` on the leaf tensors that asked for it.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf, expit

__all__ = [
    "Tensor", "Graph", "ShapeError", "GraphError",
    "add", "sub", "mul", "matmul", "reshape", "transpose", "concat",
    "slice_axis", "repeat0", "softmax", "layernorm", "gelu", "softplus",
    "sum", "mean", "cross_entropy", "forward_op", "backward",
    "finite_difference_errors", "finite_difference_check", "zero_grad",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's rule."""


class GraphError(RuntimeError):
    """Raised on misuse of a recording graph (e.g. double backward)."""


class Tensor:
    """A dense array plus autodiff bookkeeping.

    ``data`` is always a numpy array. Lists and scalars are promoted to
    float32 (the training dtype); ndarrays keep their dtype so float64
    models can be built for the finite-difference oracle.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.generic)):
            arr = np.asarray(data)
        else:
            arr = np.asarray(data)
            if arr.dtype.kind == "f":
                arr = arr.astype(np.float32)
        if any(d == 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar so model code reads like math
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Graph:
    """A tape of recorded ops, consumable by exactly one backward pass.

    Use as a context manager; ops executed inside record themselves when any
    input requires a gradient. ``parameters`` collects the leaf tensors
    (requires_grad inputs not produced on this tape) in first-use order.
    """

    def __init__(self):
        self.nodes = []          # (out, op_kind, [(input, vjp), ...]) in execution order
        self.parameters = []
        self._param_ids = set()
        self._produced = set()
        self.consumed = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.pop()
        return False


_ACTIVE: list[Graph] = []


def _record(op_kind: str, out: Tensor, pairs) -> Tensor:
    """Attach a node to the active graph; pairs hold (input, vjp) for grad-requiring inputs."""
    if not pairs:
        return out
    out.requires_grad = True
    if _ACTIVE:
        g = _ACTIVE[-1]
        for t, _ in pairs:
            if id(t) not in g._produced and id(t) not in g._param_ids:
                g._param_ids.add(id(t))
                g.parameters.append(t)
        g._produced.add(id(out))
        g.nodes.append((out, op_kind, pairs))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _sum_to(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient over the leading axes broadcast away in the forward pass."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def _check_trailing(op: str, a: Tensor, b: Tensor):
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not align")


def add(a, b) -> Tensor:
    """Elementwise a + b; b may also be a trailing-shape bias broadcast over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_trailing("add", a, b)
    out = Tensor(a.data + b.data)
    pairs = []
    if a.requires_grad:
        pairs.append((a, lambda g: g))
    if b.requires_grad:
        pairs.append((b, lambda g, s=b.shape: _sum_to(g, s)))
    return _record("add", out, pairs)


def sub(a, b) -> Tensor:
    """Elementwise a - b with the same broadcast rule as add."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_trailing("sub", a, b)
    out = Tensor(a.data - b.data)
    pairs = []
    if a.requires_grad:
        pairs.append((a, lambda g: g))
    if b.requires_grad:
        pairs.append((b, lambda g, s=b.shape: -_sum_to(g, s)))
    return _record("sub", out, pairs)


def mul(a, b) -> Tensor:
    """Elementwise or scalar product; the trailing-broadcast rule of add applies."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        k = float(b)
        out = Tensor(a.data * np.asarray(k, dtype=a.dtype))
        pairs = [(a, lambda g: g * k)] if a.requires_grad else []
        return _record("mul", out, pairs)
    b = _as_tensor(b)
    _check_trailing("mul", a, b)
    out = Tensor(a.data * b.data)
    pairs = []
    if a.requires_grad:
        pairs.append((a, lambda g, bd=b.data: g * bd))
    if b.requires_grad:
        pairs.append((b, lambda g, ad=a.data, s=b.shape: _sum_to(g * ad, s)))
    return _record("mul", out, pairs)


def matmul(a, b) -> Tensor:
    """Matrix product on the last two axes.

    Supported: (..., m, k) @ (k, n) with the 2-D operand shared across
    leading axes, and (..., m, k) @ (..., k, n) with identical leading axes.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dimensions differ, {a.shape} vs {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    pairs = []
    if a.requires_grad:
        pairs.append((a, lambda g, bd=b.data: np.matmul(g, bd.swapaxes(-1, -2))))
    if b.requires_grad:
        if b.ndim == 2 and a.ndim > 2:
            k, n = b.shape
            pairs.append((b, lambda g, ad=a.data, k=k, n=n:
                          np.matmul(ad.reshape(-1, k).T, g.reshape(-1, n))))
        else:
            pairs.append((b, lambda g, ad=a.data: np.matmul(ad.swapaxes(-1, -2), g)))
    return _record("matmul", out, pairs)


def reshape(t, shape) -> Tensor:
    t = _as_tensor(t)
    out = Tensor(t.data.reshape(shape))
    pairs = [(t, lambda g, s=t.shape: g.reshape(s))] if t.requires_grad else []
    return _record("reshape", out, pairs)


def transpose(t, axes) -> Tensor:
    t = _as_tensor(t)
    axes = tuple(axes)
    out = Tensor(t.data.transpose(axes))
    inv = tuple(np.argsort(axes))
    pairs = [(t, lambda g, inv=inv: g.transpose(inv))] if t.requires_grad else []
    return _record("transpose", out, pairs)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    pairs = []
    offset = 0
    for t in tensors:
        width = t.shape[axis]
        if t.requires_grad:
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(offset, offset + width)
            pairs.append((t, lambda g, sl=tuple(sl): g[sl]))
        offset += width
    return _record("concat", out, pairs)


def slice_axis(t, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous range along one axis."""
    t = _as_tensor(t)
    sl = [slice(None)] * t.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = Tensor(t.data[sl])

    def vjp(g, sl=sl, shape=t.shape):
        full = np.zeros(shape, dtype=g.dtype)
        full[sl] = g
        return full

    pairs = [(t, vjp)] if t.requires_grad else []
    return _record("slice_axis", out, pairs)


def repeat0(t, reps: int) -> Tensor:
    """Repeat a leading length-1 axis, e.g. to hand one CLS token to every bag in a batch."""
    t = _as_tensor(t)
    if t.shape[0] != 1:
        raise ShapeError(f"repeat0: leading dimension must be 1, got shape {t.shape}")
    out = Tensor(np.repeat(t.data, reps, axis=0))
    pairs = [(t, lambda g: g.sum(axis=0, keepdims=True))] if t.requires_grad else []
    return _record("repeat0", out, pairs)


def softmax(t, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; exponentials and the normalizer run in float64."""
    t = _as_tensor(t)
    z = t.data.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = (e / e.sum(axis=axis, keepdims=True)).astype(t.dtype)
    out = Tensor(s)

    def vjp(g, s=s, axis=axis):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (g - inner) * s

    pairs = [(t, vjp)] if t.requires_grad else []
    return _record("softmax", out, pairs)


def layernorm(t, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine part)."""
    t = _as_tensor(t)
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Tensor(y.astype(t.dtype, copy=False))

    def vjp(g, y=y, inv=inv):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (g - gm - y * gym) * inv

    pairs = [(t, vjp)] if t.requires_grad else []
    return _record("layernorm", out, pairs)


def gelu(t) -> Tensor:
    """Exact (erf-based) GELU."""
    t = _as_tensor(t)
    x = t.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor((x * phi).astype(t.dtype, copy=False))

    def vjp(g, x=x, phi=phi):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return g * (phi + x * pdf)

    pairs = [(t, vjp)] if t.requires_grad else []
    return _record("gelu", out, pairs)


def softplus(t) -> Tensor:
    """log(1 + exp(x)), the nonnegative link used by the soft-label head."""
    t = _as_tensor(t)
    out = Tensor(np.logaddexp(0.0, t.data).astype(t.dtype, copy=False))
    pairs = [(t, lambda g, x=t.data: g * expit(x))] if t.requires_grad else []
    return _record("softplus", out, pairs)


def sum(t, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy's name on purpose
    t = _as_tensor(t)
    out = Tensor(np.sum(t.data, axis=axis, dtype=np.float64).astype(t.dtype))

    def vjp(g, shape=t.shape, axis=axis):
        if axis is None:
            return np.broadcast_to(g, shape).astype(g.dtype, copy=False).copy()
        g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    pairs = [(t, vjp)] if t.requires_grad else []
    return _record("sum", out, pairs)


def mean(t, axis=None) -> Tensor:
    t = _as_tensor(t)
    out = Tensor(np.mean(t.data, axis=axis, dtype=np.float64).astype(t.dtype))
    count = t.size if axis is None else t.shape[axis]

    def vjp(g, shape=t.shape, axis=axis, count=count):
        if axis is None:
            return (np.broadcast_to(g, shape) / count).astype(g.dtype, copy=False)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / count).astype(g.dtype, copy=False)

    pairs = [(t, vjp)] if t.requires_grad else []
    return _record("mean", out, pairs)


def cross_entropy(logits, labels) -> Tensor:
    """Mean cross entropy of row logits against integer class labels."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: need (B, C) logits and (B,) labels, got {logits.shape} and {labels.shape}")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    rows = np.arange(labels.shape[0])
    nll = np.log(e.sum(axis=1)) - z[rows, labels]
    out = Tensor(np.asarray(nll.mean(), dtype=logits.dtype))

    def vjp(g, p=p, labels=labels, rows=rows, dtype=logits.dtype):
        grad = p.copy()
        grad[rows, labels] -= 1.0
        return (grad * (g / labels.shape[0])).astype(dtype)

    pairs = [(logits, vjp)] if logits.requires_grad else []
    return _record("cross_entropy", out, pairs)


_OPS = {
    "add": add, "sub": sub, "mul": mul, "matmul": matmul, "reshape": reshape,
    "transpose": transpose, "concat": concat, "slice_axis": slice_axis,
    "repeat0": repeat0, "softmax": softmax, "layernorm": layernorm,
    "gelu": gelu, "softplus": softplus, "sum": sum, "mean": mean,
    "cross_entropy": cross_entropy,
}


def forward_op(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name; the node is recorded on the active graph."""
    if op_kind not in _OPS:
        raise KeyError(f"unknown op_kind {op_kind!r}; known: {sorted(_OPS)}")
    return _OPS[op_kind](*inputs, **kwargs)


def backward(graph: Graph, loss: Tensor) -> dict:
    """Propagate d(loss)/d(param) through the tape.

    Accumulates into each parameter's ``.grad`` and returns this pass's
    gradients keyed by parameter tensor. The graph is consumed: a second
    backward on it raises.
    """
    if graph.consumed:
        raise GraphError("graph already consumed by a previous backward pass")
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss)
        raise ShapeError(f"backward expects a scalar loss, got {shape}")
    graph.consumed = True

    grads = {id(loss): np.ones_like(loss.data)}
    for out, _op_kind, pairs in reversed(graph.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, vjp in pairs:
            contrib = vjp(g)
            acc = grads.get(id(t))
            grads[id(t)] = contrib if acc is None else acc + contrib

    result = {}
    for p in graph.parameters:
        gp = grads.get(id(p))
        if gp is None:
            gp = np.zeros_like(p.data)
        gp = np.ascontiguousarray(gp, dtype=p.data.dtype)
        if gp.shape != p.shape:
            raise ShapeError(f"gradient shape {gp.shape} != parameter shape {p.shape}")
        p.grad = gp if p.grad is None else p.grad + gp
        result[p] = gp
    graph.nodes.clear()
    return result


def zero_grad(params):
    for p in params:
        p.grad = None


def finite_difference_errors(f, params, h: float = 1e-4):
    """Relative error of analytic vs central-difference gradients, per entry.

    ``f`` must be a deterministic zero-argument callable returning the scalar
    loss as a Tensor, recomputed from the current parameter values. Returns
    one float64 error array per parameter. For meaningful comparisons build
    the parameters in float64; the difference quotient itself is float64.
    """
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    with Graph() as g:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is non-finite at the unperturbed point")
    analytic = backward(g, loss)

    errors = []
    for pi, p in enumerate(params):
        an = analytic.get(p)
        if an is None:
            an = np.zeros_like(p.data)
        an = an.reshape(-1).astype(np.float64)
        flat = p.data.reshape(-1)
        num = np.empty(flat.shape, np.float64)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = float(f().data)
            flat[j] = orig - h
            fm = float(f().data)
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(
                    f"non-finite loss while perturbing parameter {pi}, entry {j}")
            num[j] = (fp - fm) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(an), np.abs(num)), 1e-8)
        errors.append(np.abs(an - num) / denom)
    return errors


def finite_difference_check(f, params, h: float = 1e-4) -> float:
    """Max relative error over all parameter entries; see finite_difference_errors."""
    errors = finite_difference_errors(f, params, h)
    return max((float(e.max()) for e in errors if e.size), default=0.0)
