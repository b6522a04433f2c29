"""Dense reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every :class:`Var` in creation order; because an
operation can only consume nodes that already exist, creation order is a
topological order and :func:`backward` simply walks the list in reverse.

Only rank-1 and rank-2 arrays are used. Binary elementwise operations
accept identical shapes, or one operand with a single element (scalar
broadcast). Row-vector bias addition has its own operation, :func:`add_row`.

Graphs are built per mini-batch and thrown away afterwards::

    tape = Tape()
    w = tape.var(weights, name="w")
    loss = mean(tanh(x @ w))
    backward(tape, loss)
    w.grad
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence

import numpy as np

LEAKY_SLOPE = 0.01

_ids = itertools.count()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An operand lies outside the mathematical domain of the operation."""


class ContractError(RuntimeError):
    """An operation was used in a way its contract forbids."""


class Tape:
    """Ordered record of the nodes of one computation graph."""

    def __init__(self):
        self.nodes: list[Var] = []
        self._consumed = False

    def var(self, value, name: Optional[str] = None, requires_grad: bool = True) -> "Var":
        """Register a leaf node (parameter or input)."""
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim > 2:
            raise DimensionError(f"rank {arr.ndim} arrays are not supported: shape {arr.shape}")
        return Var(self, arr, op="leaf", name=name, requires_grad=requires_grad)

    def constant(self, value, name: Optional[str] = None) -> "Var":
        """A leaf that never receives a gradient."""
        return self.var(value, name=name, requires_grad=False)

    def __len__(self):
        return len(self.nodes)

    def release(self) -> None:
        """Drop every node's value, closure and parent links.

        Nodes and the tape reference each other, so without this a finished
        graph waits for the cyclic collector, which large array buffers do
        not trigger. Leaf gradients already read out stay valid.
        """
        for n in self.nodes:
            n.parents = ()
            n._backward = None
            n.value = None
        self.nodes.clear()


class Var:
    """A node holding a float64 value and, after :func:`backward`, its gradient."""

    __array_priority__ = 1000  # make ndarray <op> Var defer to Var's reflected ops

    def __init__(self, tape: Tape, value: np.ndarray, op: str, parents=(), backward_fn=None, name=None, requires_grad=True):
        self.tape = tape
        self.id = next(_ids)
        self.value = value
        self.op = op
        self.name = name
        self.parents = tuple(parents)
        self._backward = backward_fn
        self._grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad if not self.parents else any(p.requires_grad for p in self.parents)
        for p in self.parents:
            if p.tape is not tape:
                raise ContractError(f"{op}: operands belong to different tapes")
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def _accumulate(self, g: np.ndarray):
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64, copy=True).reshape(self.value.shape)
        else:
            self._grad += g.reshape(self.value.shape)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, _lift(self, other))

    def __radd__(self, other):
        return add(_lift(self, other), self)

    def __sub__(self, other):
        return sub(self, _lift(self, other))

    def __rsub__(self, other):
        return sub(_lift(self, other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(self, other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(self, other))

    def __rmatmul__(self, other):
        return matmul(_lift(self, other), self)


def _lift(ref: Var, x) -> Var:
    if isinstance(x, Var):
        return x
    return ref.tape.constant(x)


def _node(parents: Sequence[Var], value: np.ndarray, op: str, backward_fn) -> Var:
    return Var(parents[0].tape, value, op=op, parents=parents, backward_fn=backward_fn)


def _check_binary(op: str, a: Var, b: Var):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _unbroadcast(g: np.ndarray, target: Var) -> np.ndarray:
    if g.shape == target.shape:
        return g
    # target was a single-element operand broadcast over g
    return np.array(g.sum()).reshape(target.shape)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Var, b: Var) -> Var:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def bw(g):
        return (
            g @ b.value.T if a.requires_grad else None,
            a.value.T @ g if b.requires_grad else None,
        )

    return _node((a, b), a.value @ b.value, "matmul", bw)


def add_row(x: Var, b: Var) -> Var:
    """x[m, n] + b broadcast along rows; b has n elements."""
    if x.value.ndim != 2 or b.size != x.shape[1]:
        raise DimensionError(f"add_row: bias of shape {b.shape} does not fit {x.shape}")
    brow = b.value.reshape(1, -1)

    def bw(g):
        return g, g.sum(axis=0).reshape(b.shape)

    return _node((x, b), x.value + brow, "add_row", bw)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Var, b: Var) -> Var:
    _check_binary("add", a, b)
    return _node((a, b), a.value + b.value, "add", lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a: Var, b: Var) -> Var:
    _check_binary("sub", a, b)
    return _node((a, b), a.value - b.value, "sub", lambda g: (_unbroadcast(g, a), -_unbroadcast(g, b)))


def mul(a: Var, b: Var) -> Var:
    _check_binary("mul", a, b)
    def bw(g):
        return (
            _unbroadcast(g * b.value, a) if a.requires_grad else None,
            _unbroadcast(g * a.value, b) if b.requires_grad else None,
        )

    return _node((a, b), a.value * b.value, "mul", bw)


def scale(v: Var, c: float) -> Var:
    return _node((v,), v.value * c, "scale", lambda g: (g * c,))


def leaky_relu(v: Var, slope: float = LEAKY_SLOPE) -> Var:
    x = v.value
    pos = x > 0
    out = np.where(pos, x, slope * x)
    return _node((v,), out, "leaky_relu", lambda g: (_leaky_relu_grad(g, pos, slope),))


def _leaky_relu_grad(g, pos, slope):
    return np.where(pos, g, slope * g)


def relu(v: Var) -> Var:
    pos = v.value > 0
    return _node((v,), np.where(pos, v.value, 0.0), "relu", lambda g: (np.where(pos, g, 0.0),))


def tanh(v: Var) -> Var:
    out = np.tanh(v.value)
    return _node((v,), out, "tanh", lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(v: Var) -> Var:
    out = _sigmoid(v.value)
    return _node((v,), out, "sigmoid", lambda g: (g * out * (1.0 - out),))


def log(v: Var) -> Var:
    if np.any(v.value <= 0):
        raise DomainError(f"log of non-positive value (min {v.value.min()!r})")
    x = v.value
    return _node((v,), np.log(x), "log", lambda g: (g / x,))


def exp(v: Var) -> Var:
    out = np.exp(v.value)
    return _node((v,), out, "exp", lambda g: (g * out,))


def clip(v: Var, lo: float, hi: float) -> Var:
    inside = (v.value >= lo) & (v.value <= hi)
    return _node((v,), np.clip(v.value, lo, hi), "clip", lambda g: (np.where(inside, g, 0.0),))


_ELEMENTWISE: Dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "leaky_relu": leaky_relu,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "log": log,
    "exp": exp,
    "scale": scale,
}


def elementwise(kind: str, *operands, **kwargs) -> Var:
    """Dispatch an elementwise operation by name."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(*operands, **kwargs)


def activation(kind: str, v: Var) -> Var:
    """Apply a named activation; ``"none"`` is the identity."""
    if kind == "none":
        return v
    if kind not in ("leaky_relu", "relu", "tanh", "sigmoid"):
        raise ValueError(f"unknown activation {kind!r}")
    return _ELEMENTWISE[kind](v)


# ---------------------------------------------------------------------------
# reductions


def _check_axis(op: str, v: Var, axis):
    if axis is not None and not (-v.value.ndim <= axis < v.value.ndim):
        raise DimensionError(f"{op}: axis {axis} is invalid for shape {v.shape}")


def sum(v: Var, axis: Optional[int] = None) -> Var:  # noqa: A001 - mirrors numpy naming
    _check_axis("sum", v, axis)
    shape = v.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node((v,), np.asarray(v.value.sum(axis=axis)), "sum", bw)


def mean(v: Var, axis: Optional[int] = None) -> Var:
    _check_axis("mean", v, axis)
    n = v.size if axis is None else v.shape[axis]
    shape = v.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)

    return _node((v,), np.asarray(v.value.mean(axis=axis)), "mean", bw)


def reduce(kind: str, v: Var, axis: Optional[int] = None) -> Var:
    if kind == "sum":
        return sum(v, axis)
    if kind == "mean":
        return mean(v, axis)
    raise ValueError(f"unknown reduction {kind!r}")


def logsumexp(v: Var, axis: int = -1) -> Var:
    """Numerically stable log-sum-exp along one axis."""
    _check_axis("logsumexp", v, axis)
    x = v.value
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    soft = e / s

    def bw(g):
        return (np.expand_dims(g, axis) * soft,)

    return _node((v,), out, "logsumexp", bw)


# ---------------------------------------------------------------------------
# structure


def concat(parts: Sequence[Var], axis: int = -1) -> Var:
    if not parts:
        raise DimensionError("concat: no parts")
    ndim = parts[0].value.ndim
    ax = axis % ndim
    for p in parts:
        if p.value.ndim != ndim or any(
            p.shape[k] != parts[0].shape[k] for k in range(ndim) if k != ax
        ):
            raise DimensionError(
                f"concat: shapes {[q.shape for q in parts]} disagree off axis {axis}"
            )
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=ax) for k in range(len(parts))
        )

    return _node(tuple(parts), np.concatenate([p.value for p in parts], axis=ax), "concat", bw)


def reshape(v: Var, shape: tuple) -> Var:
    try:
        out = v.value.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {v.shape} as {shape}") from exc
    if out.ndim > 2:
        raise DimensionError(f"reshape: rank {out.ndim} is not supported")
    src = v.shape
    return _node((v,), out, "reshape", lambda g: (g.reshape(src),))


class _ScatterPlan:
    """Precomputed sorted layout for summing gathered columns back."""

    def __init__(self, idx: np.ndarray, width: int):
        self.order = np.argsort(idx, kind="stable")
        sorted_idx = idx[self.order]
        self.targets, self.starts = np.unique(sorted_idx, return_index=True)
        self.width = width

    def scatter(self, g: np.ndarray) -> np.ndarray:
        out = np.zeros((g.shape[0], self.width))
        out[:, self.targets] = np.add.reduceat(g[:, self.order], self.starts, axis=1)
        return out


def take_columns(v: Var, idx: np.ndarray, plan: Optional[_ScatterPlan] = None) -> Var:
    """Gather columns ``v[:, idx]``; repeated indices accumulate in backward."""
    idx = np.asarray(idx, dtype=np.int64)
    if v.value.ndim != 2:
        raise DimensionError(f"take_columns: expected a matrix, got {v.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= v.shape[1]):
        raise DimensionError(f"take_columns: index out of range for {v.shape}")
    plan = plan or _ScatterPlan(idx, v.shape[1])
    return _node((v,), v.value[:, idx], "take_columns", lambda g: (plan.scatter(g),))


def pair_products(v: Var, left: np.ndarray, right: np.ndarray, plan_left: _ScatterPlan, plan_right: _ScatterPlan) -> Var:
    """Fused ``v[:, left] * v[:, right]``; only the product is kept for backward."""
    if v.value.ndim != 2:
        raise DimensionError(f"pair_products: expected a matrix, got {v.shape}")
    x = v.value
    out = x[:, left] * x[:, right]

    def bw(g):
        return (plan_left.scatter(g * x[:, right]) + plan_right.scatter(g * x[:, left]),)

    return _node((v,), out, "pair_products", bw)


def _activation_grad(kind: str, g: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Activation derivative expressed through the activation's output."""
    if kind == "leaky_relu":
        return _leaky_relu_grad(g, y > 0, LEAKY_SLOPE)
    if kind == "relu":
        return g * (y > 0)
    if kind == "tanh":
        return g * (1.0 - y * y)
    if kind == "sigmoid":
        return g * y * (1.0 - y)
    return g


_DENSE_ACT = {
    "leaky_relu": lambda z: np.where(z > 0, z, LEAKY_SLOPE * z),
    "relu": lambda z: np.maximum(z, 0.0),
    "tanh": np.tanh,
    "sigmoid": lambda z: _sigmoid(z),
    "none": lambda z: z,
}


def dense(x: Var, w: Var, b: Var, act: str = "none") -> Var:
    """Fused ``act(x @ w + b)``.

    Keeps only the layer output, which is what dominates memory at large
    batch sizes; every supported activation's derivative is recoverable
    from its output.
    """
    if act not in _DENSE_ACT:
        raise ValueError(f"unknown activation {act!r}")
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"dense: cannot multiply {x.shape} by {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"dense: bias {b.shape} does not match output width {w.shape[1]}")
    z = x.value @ w.value
    z += b.value
    y = _DENSE_ACT[act](z)

    def bw(g):
        gz = _activation_grad(act, g, y)
        gx = gz @ w.value.T if x.requires_grad else None
        gw = x.value.T @ gz if w.requires_grad else None
        return gx, gw, gz.sum(axis=0)

    return _node((x, w, b), y, f"dense_{act}", bw)


def embedding_lookup(table: Var, rows: np.ndarray) -> Var:
    """Gather ``table[rows]`` for a [B, f] index matrix into a [B, f*d] Var.

    Backward scatters into the touched rows only; an index appearing twice
    receives its gradient twice.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if rows.ndim != 2:
        raise DimensionError(f"embedding_lookup: indices must be [B, f], got {rows.shape}")
    n, d = table.shape
    if rows.size and (rows.min() < 0 or rows.max() >= n):
        raise ContractError(f"embedding_lookup: index out of range for table with {n} rows")
    b, f = rows.shape
    flat = rows.reshape(-1)

    def bw(g):
        out = np.zeros((n, d))
        np.add.at(out, flat, g.reshape(b * f, d))
        return (out,)

    out = _node((table,), table.value[flat].reshape(b, f * d), "embedding_lookup", bw)
    out.touched_rows = np.unique(flat)
    return out


# ---------------------------------------------------------------------------
# fused kernels used by the contrastive and cosine losses


def l2_normalize_rows(v: Var, eps: float = 1e-12) -> Var:
    """Scale each row to unit norm; rows with norm below ``eps`` become zero."""
    if v.value.ndim != 2:
        raise DimensionError(f"l2_normalize_rows: expected a matrix, got {v.shape}")
    x = v.value
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))[:, None]
    ok = norms > eps
    safe = np.where(ok, norms, 1.0)
    out = np.where(ok, x / safe, 0.0)

    def bw(g):
        proj = np.einsum("ij,ij->i", g, out)[:, None]
        return (np.where(ok, (g - out * proj) / safe, 0.0),)

    node = _node((v,), out, "l2_normalize_rows", bw)
    node.degenerate_rows = int((~ok).sum())
    return node


def gram_logsumexp(a: Var, c: Var, scale: float = 1.0, chunk: int = 1024) -> Var:
    """Row-wise ``log sum_j exp(scale * a_i . c_j)`` without materialising the full Gram matrix."""
    if a.value.ndim != 2 or c.value.ndim != 2 or a.shape[1] != c.shape[1]:
        raise DimensionError(f"gram_logsumexp: shapes {a.shape} and {c.shape} are not aligned")
    A, C = a.value, c.value
    n = A.shape[0]
    out = np.empty(n)
    for lo in range(0, n, chunk):
        s = scale * (A[lo : lo + chunk] @ C.T)
        m = s.max(axis=1, keepdims=True)
        out[lo : lo + chunk] = (np.log(np.exp(s - m).sum(axis=1, keepdims=True)) + m)[:, 0]

    def bw(g):
        ga = np.empty_like(A)
        gc = np.zeros_like(C)
        for lo in range(0, n, chunk):
            s = scale * (A[lo : lo + chunk] @ C.T)
            p = np.exp(s - out[lo : lo + chunk, None])
            p *= g[lo : lo + chunk, None] * scale
            ga[lo : lo + chunk] = p @ C
            gc += p.T @ A[lo : lo + chunk]
        return ga, gc

    return _node((a, c), out, "gram_logsumexp", bw)


# ---------------------------------------------------------------------------
# backward pass and finite-difference verification


def backward(tape: Tape, root: Var, retain_grads: bool = False) -> None:
    """Fill ``grad`` of every leaf with d(root)/d(leaf).

    Gradients of interior nodes are released once propagated unless
    ``retain_grads`` is set.
    """
    if root.tape is not tape:
        raise ContractError("backward: root was recorded on a different tape")
    if root.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {root.shape}")
    if tape._consumed:
        raise ContractError("backward: tape already differentiated; build a new graph")
    tape._consumed = True
    root._accumulate(np.ones_like(root.value))
    for node in reversed(tape.nodes[: tape.nodes.index(root) + 1]):
        if node._grad is None or node._backward is None or not node.requires_grad:
            continue
        grads = node._backward(node._grad)
        for parent, g in zip(node.parents, grads):
            if g is not None and parent.requires_grad:
                parent._accumulate(np.asarray(g))
        if not retain_grads and node is not root:
            node._grad = None


@dataclass
class GradCheckReport:
    errors: Dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors.values())

    @property
    def failures(self) -> Dict[str, float]:
        return {k: e for k, e in self.errors.items() if not e < self.tol}

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def roundoff_floor(value: float, eps: float, tol: float) -> float:
    """Gradient magnitude below which central-difference round-off alone
    (about machine epsilon * |f| / eps) could exceed ``tol`` in relative terms."""
    return float(np.finfo(np.float64).eps * max(abs(value), 1.0) / (eps * tol))


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    """Largest entrywise ``|a - n| / max(|a|, |n|, floor)``.

    The floor is at least 1e-6 of the largest numeric entry (and 1e-12), so
    entries that are essentially zero compared with the rest of the tensor
    are judged on an absolute scale instead of amplifying round-off.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    floor = max(floor, 1e-6 * float(np.abs(n).max()), 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def grad_check(
    f: Callable[[Tape, Dict[str, Var]], Var],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-6,
    tol: float = 1e-4,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` with central differences.

    ``f(tape, vars)`` must rebuild the same scalar deterministically from the
    parameter arrays. With ``max_entries`` only a random subset of each
    parameter's entries is perturbed.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(values):
        tape = Tape()
        vs = {k: tape.var(v, name=k) for k, v in values.items()}
        return tape, vs, f(tape, vs)

    tape, vs, out = evaluate(base)
    backward(tape, out)
    analytic = {k: v.grad.copy() for k, v in vs.items()}
    floor = roundoff_floor(float(out.value.sum()), eps, tol)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name, arr in base.items():
        flat_idx = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            flat_idx = rng.choice(arr.size, size=max_entries, replace=False)
        numeric = np.empty(flat_idx.size)
        for j, k in enumerate(flat_idx):
            probe = dict(base)
            bumped = arr.copy()
            bumped.flat[k] += eps
            probe[name] = bumped
            hi = float(evaluate(probe)[2].value.sum())
            bumped.flat[k] -= 2 * eps
            lo = float(evaluate(probe)[2].value.sum())
            numeric[j] = (hi - lo) / (2 * eps)
        report.errors[name] = relative_error(analytic[name].ravel()[flat_idx], numeric, floor)
    return report
