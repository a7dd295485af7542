"""Dense fp64 tensors with reverse-mode automatic differentiation.

Every forward primitive that touches a gradient-carrying input records a
vector-Jacobian rule on the result; ``backward`` replays the recorded
applications in reverse topological order (forward creation order is a
valid topological order of the DAG). The primitive set is fixed and small
on purpose: everything else in the package is composed from these kinds.

There is no broadcasting except scalar multiplication and bias addition
(matrix + row vector). Scalars are rank-0 tensors.
"""

from __future__ import annotations

import numpy as np

_EPS_NORM = 1e-12   # norm clamp for l2-normalize / cosine
_LN_EPS = 1e-5      # layer-norm variance epsilon

_debug_finite = False


def set_debug(enabled: bool) -> None:
    """Toggle finite-value assertions after every forward primitive."""
    global _debug_finite
    _debug_finite = bool(enabled)


class Tensor:
    """Row-major fp64 tensor: flat storage plus a shape tuple."""

    __slots__ = ("shape", "data", "requires_grad", "grad", "_entry", "_backward_done")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        self.shape = arr.shape
        self.data = np.ascontiguousarray(arr).reshape(-1).copy()
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._entry = None
        self._backward_done = False

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return len(self.shape)

    def value(self) -> np.ndarray:
        """Shaped read view of the flat storage."""
        return self.data.reshape(self.shape)

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item: tensor of shape {self.shape} is not scalar")
        return float(self.data[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class TapeEntry:
    """One recorded primitive application: operands plus a VJP rule."""

    __slots__ = ("inputs", "vjp")

    def __init__(self, inputs, vjp):
        self.inputs = inputs
        self.vjp = vjp


def _wrap(arr: np.ndarray, inputs, vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    arr = np.asarray(arr, dtype=np.float64)
    out.shape = arr.shape
    out.data = np.ascontiguousarray(arr).reshape(-1)
    out.grad = None
    out._backward_done = False
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._entry = TapeEntry(tuple(inputs), vjp)
    else:
        out.requires_grad = False
        out._entry = None
    if _debug_finite and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("primitive produced non-finite values")
    return out


def _need(inputs):
    return tuple(t.requires_grad for t in inputs)


# ---------------------------------------------------------------------------
# primitive implementations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value(), b.value()
    na, nb = _need((a, b))

    def vjp(g):
        return (g @ bv.T if na else None, av.T @ g if nb else None)

    return _wrap(av @ bv, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        bias = False
    elif a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        bias = True   # matrix + row bias
    else:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")
    na, nb = _need((a, b))

    def vjp(g):
        gb = (g.sum(axis=0) if bias else g) if nb else None
        return (g if na else None, gb)

    return _wrap(a.value() + b.value(), (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    na, nb = _need((a, b))

    def vjp(g):
        return (g if na else None, -g if nb else None)

    return _wrap(a.value() - b.value(), (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"elementwise-mul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value(), b.value()
    na, nb = _need((a, b))

    def vjp(g):
        return (g * bv if na else None, g * av if nb else None)

    return _wrap(av * bv, (a, b), vjp)


def smul(a: Tensor, scalar: float) -> Tensor:
    s = float(scalar)

    def vjp(g):
        return (g * s,)

    return _wrap(a.value() * s, (a,), vjp)


def concat(parts, axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat: no inputs")
    nd = parts[0].ndim
    if nd == 0:
        raise ValueError("concat: scalar inputs not supported")
    for p in parts:
        if p.ndim != nd:
            raise ValueError(
                f"concat: rank mismatch {parts[0].shape} vs {p.shape}")
        for ax in range(nd):
            if ax != axis and p.shape[ax] != parts[0].shape[ax]:
                raise ValueError(
                    f"concat: incompatible shapes {parts[0].shape} and {p.shape} on axis {axis}")
    if not 0 <= axis < nd:
        raise ValueError(f"concat: axis {axis} out of range for rank {nd}")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]
    needs = _need(parts)

    def vjp(g):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(p if n else None for p, n in zip(pieces, needs))

    return _wrap(np.concatenate([p.value() for p in parts], axis=axis), parts, vjp)


def reshape(a: Tensor, new_shape) -> Tensor:
    new_shape = tuple(int(s) for s in new_shape)
    if int(np.prod(new_shape)) != a.size:
        raise ValueError(f"reshape: cannot reshape {a.shape} to {new_shape}")
    old = a.shape

    def vjp(g):
        return (g.reshape(old),)

    return _wrap(a.value().reshape(new_shape), (a,), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"transpose: expected a matrix, got shape {a.shape}")

    def vjp(g):
        return (g.T,)

    return _wrap(a.value().T, (a,), vjp)


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather: also used to select hidden rows by position."""
    if table.ndim != 2:
        raise ValueError(f"embedding-lookup: table must be a matrix, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("embedding-lookup: ids must be a flat index sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(
            f"embedding-lookup: index out of range for table with {table.shape[0]} rows")
    tshape = table.shape

    def vjp(g):
        gt = np.zeros(tshape)
        np.add.at(gt, idx, g)
        return (gt,)

    return _wrap(table.value()[idx], (table,), vjp)


def _axis_check(a: Tensor, axis: int, kind: str) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"{kind}: axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim if a.ndim else 0


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.ndim == 0:
        raise ValueError("softmax: scalar input")
    axis = _axis_check(a, axis, "softmax")
    av = a.value()
    ex = np.exp(av - av.max(axis=axis, keepdims=True))
    s = ex / ex.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _wrap(s, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.ndim == 0:
        raise ValueError("log-softmax: scalar input")
    axis = _axis_check(a, axis, "log-softmax")
    av = a.value()
    shifted = av - av.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def vjp(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _wrap(out, (a,), vjp)


def layer_norm(a: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    if a.ndim == 0:
        raise ValueError("layer-norm: scalar input")
    av = a.value()
    mu = av.mean(axis=-1, keepdims=True)
    var = av.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    y = (av - mu) * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _wrap(y, (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    av = a.value()
    k = np.sqrt(2.0 / np.pi)
    u = k * (av + 0.044715 * av ** 3)
    t = np.tanh(u)
    y = 0.5 * av * (1.0 + t)

    def vjp(g):
        du = k * (1.0 + 3 * 0.044715 * av ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * av * (1.0 - t ** 2) * du),)

    return _wrap(y, (a,), vjp)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    av = a.value()
    s = float(slope)
    pos = av >= 0

    def vjp(g):
        return (np.where(pos, g, s * g),)

    return _wrap(np.where(pos, av, s * av), (a,), vjp)


def mean(a: Tensor) -> Tensor:
    n = a.size
    if n == 0:
        raise ValueError("mean: empty tensor")
    shape = a.shape

    def vjp(g):
        return (np.full(shape, float(g) / n),)

    return _wrap(np.asarray(a.data.mean()), (a,), vjp)


def tsum(a: Tensor) -> Tensor:
    shape = a.shape

    def vjp(g):
        return (np.full(shape, float(g)),)

    return _wrap(np.asarray(a.data.sum()), (a,), vjp)


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mse: incompatible shapes {a.shape} and {b.shape}")
    diff = a.value() - b.value()
    n = a.size
    na, nb = _need((a, b))

    def vjp(g):
        d = (2.0 / n) * float(g) * diff
        return (d if na else None, -d if nb else None)

    return _wrap(np.asarray((diff ** 2).mean()), (a, b), vjp)


def nll_from_log_softmax(logp: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of per-row target ids."""
    if logp.ndim != 2:
        raise ValueError(f"nll-from-log-softmax: expected a matrix, got {logp.shape}")
    idx = np.asarray(targets, dtype=np.int64)
    t = logp.shape[0]
    if idx.shape != (t,):
        raise ValueError(
            f"nll-from-log-softmax: {t} rows but {idx.shape} targets")
    if idx.size and (idx.min() < 0 or idx.max() >= logp.shape[1]):
        raise ValueError("nll-from-log-softmax: target id out of range")
    rows = np.arange(t)
    shape = logp.shape

    def vjp(g):
        gl = np.zeros(shape)
        gl[rows, idx] = -float(g) / t
        return (gl,)

    return _wrap(np.asarray(-logp.value()[rows, idx].mean()), (logp,), vjp)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Unit-normalize along an axis; norms are clamped at 1e-12."""
    if a.ndim == 0:
        raise ValueError("l2-normalize: scalar input")
    axis = _axis_check(a, axis, "l2-normalize")
    av = a.value()
    norm = np.sqrt((av ** 2).sum(axis=axis, keepdims=True))
    clamped = norm < _EPS_NORM
    c = np.maximum(norm, _EPS_NORM)
    y = av / c

    def vjp(g):
        proj = y * (g * y).sum(axis=axis, keepdims=True)
        return (np.where(clamped, g / c, (g - proj) / c),)

    return _wrap(y, (a,), vjp)


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two vectors (norms clamped at 1e-12)."""
    if a.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"cosine-similarity: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value(), b.value()
    ca = max(float(np.linalg.norm(av)), _EPS_NORM)
    cb = max(float(np.linalg.norm(bv)), _EPS_NORM)
    clamp_a = np.linalg.norm(av) < _EPS_NORM
    clamp_b = np.linalg.norm(bv) < _EPS_NORM
    u, v = av / ca, bv / cb
    cos = float(u @ v)
    na, nb = _need((a, b))

    def vjp(g):
        gf = float(g)
        ga = gf * (v / ca) if clamp_a else gf * (v - cos * u) / ca
        gb_ = gf * (u / cb) if clamp_b else gf * (u - cos * v) / cb
        return (ga if na else None, gb_ if nb else None)

    return _wrap(np.asarray(cos), (a, b), vjp)


_KINDS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elementwise-mul": mul,
    "scalar-mul": smul,
    "concat": concat,
    "reshape": reshape,
    "transpose": transpose,
    "embedding-lookup": embedding,
    "softmax": softmax,
    "log-softmax": log_softmax,
    "layer-norm": layer_norm,
    "gelu": gelu,
    "leaky-relu": leaky_relu,
    "mean": mean,
    "sum": tsum,
    "mse": mse,
    "nll-from-log-softmax": nll_from_log_softmax,
    "l2-normalize": l2_normalize,
    "cosine-similarity": cosine,
}


def primitive(kind: str, *args, **kwargs) -> Tensor:
    """Apply a primitive by kind name. Unknown kinds are an error."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind: {kind!r}") from None
    if kind == "concat":
        return fn(args, **kwargs)
    return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(loss: Tensor):
    """Iterative post-order over recorded entries (graphs can be deep)."""
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or node._entry is None:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node._entry.inputs:
            if inp._entry is not None and id(inp) not in seen:
                stack.append((inp, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate d(loss)/d(leaf) on every gradient-carrying leaf."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._entry is None:
        raise ValueError("backward: empty tape (loss was not produced by taped primitives)")
    if loss._backward_done:
        raise RuntimeError("backward: already called on this loss; build a fresh graph")
    loss._backward_done = True

    order = _topo_order(loss)
    loss.grad = np.ones(1)
    for node in reversed(order):
        if node.grad is None:
            continue
        gshaped = node.grad.reshape(node.shape)
        grads = node._entry.vjp(gshaped)
        for inp, gi in zip(node._entry.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            flat = np.asarray(gi, dtype=np.float64).reshape(-1)
            if inp.grad is None:
                inp.grad = flat.copy()
            else:
                inp.grad += flat


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def check_gradients(f, params, h: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(*params)`` must return a scalar Tensor and be deterministic; the
    relative error per coordinate is |a - n| / max(1e-8, |a| + |n|).
    """
    params = list(params)
    first = f(*params)
    if first.size != 1:
        raise ValueError("check_gradients: f must return a scalar")
    second = f(*params)
    if not np.array_equal(first.data, second.data):
        raise ValueError("check_gradients: f is not deterministic")

    zero_grads(params)
    loss = f(*params)
    backward(loss)
    analytic = [np.zeros(p.size) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, an in zip(params, analytic):
        for i in range(p.size):
            orig = p.data[i]
            p.data[i] = orig + h
            fp = f(*params).item()
            p.data[i] = orig - h
            fm = f(*params).item()
            p.data[i] = orig
            num = (fp - fm) / (2 * h)
            err = abs(an[i] - num) / max(1e-8, abs(an[i]) + abs(num))
            if err > worst:
                worst = err
    return worst


# ---------------------------------------------------------------------------
# construction helpers
# ---------------------------------------------------------------------------

def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def randn(rng: np.random.Generator, shape, std: float = 1.0,
          requires_grad: bool = False) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=requires_grad)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def mean_scalars(scalars) -> Tensor:
    """Mean of a list of scalar tensors as one taped node."""
    scalars = list(scalars)
    if not scalars:
        raise ValueError("mean_scalars: empty list")
    if len(scalars) == 1:
        return scalars[0]
    return mean(concat([reshape(s, (1,)) for s in scalars], axis=0))
