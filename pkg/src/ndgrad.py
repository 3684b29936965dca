"""
ndgrad - dense float64 arrays with tape-based reverse-mode differentiation.

Just enough operations to backpropagate through a frozen transformer into
prefix prompts, prompt keys and classifier heads. Every op records a node on
a TapeGraph; `TapeGraph.backward` sweeps the nodes in reverse insertion order
and sums gradients when a node fans out.

GELU uses the tanh approximation (ViT convention).
"""

import math
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ContractError, DimensionError

ArrayLike = Union[np.ndarray, Sequence[float], float]


class Tensor:
    """Row-major float64 array. Leaf construction rejects NaN/Inf."""

    __slots__ = ("data",)

    def __init__(self, data: ArrayLike, shape: Optional[Sequence[int]] = None):
        arr = np.array(data, dtype=np.float64)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if arr.size != int(np.prod(shape)):
                raise DimensionError(f"{arr.size} values cannot fill shape {list(shape)}")
            arr = arr.reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise ContractError("tensor data must be finite")
        self.data = np.ascontiguousarray(arr)

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Tensor":
        """Wraps an intermediate result without copying or checking"""
        t = cls.__new__(cls)
        t.data = arr
        return t

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "Tensor":
        return cls.wrap(np.zeros(tuple(shape), dtype=np.float64))

    @property
    def shape(self) -> List[int]:
        return list(self.data.shape)

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def copy(self) -> "Tensor":
        return Tensor.wrap(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


BackwardFn = Callable[[np.ndarray, Tuple[bool, ...]], Tuple[Optional[np.ndarray], ...]]


class _Node:
    __slots__ = ("op", "inputs", "value", "backward_fn", "requires_grad", "name")

    def __init__(self, op, inputs, value, backward_fn, requires_grad, name=None):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name


class Var:
    """Handle to a node on a TapeGraph"""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "TapeGraph", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> Tensor:
        return self.tape.nodes[self.id].value

    @property
    def data(self) -> np.ndarray:
        return self.tape.nodes[self.id].value.data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.id].requires_grad

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(id={self.id}, shape={list(self.shape)})"


class TapeGraph:
    """
    Append-only record of a computation.

    Learnable leaves are registered with `param`; everything else is a frozen
    constant. With record=False nothing requires a gradient, which is how
    evaluation and finite-difference passes run.
    """

    def __init__(self, record: bool = True, frozen: Iterable[str] = ()):
        self.nodes: List[_Node] = []
        self.record = record
        self.frozen = set(frozen)
        self._params: Dict[str, int] = {}

    def param(self, tensor: Tensor, name: str) -> Var:
        if name in self._params:
            node_id = self._params[name]
            if self.nodes[node_id].value is not tensor:
                raise ContractError(f"parameter name '{name}' registered twice with different tensors")
            return Var(self, node_id)
        learnable = self.record and name not in self.frozen
        self.nodes.append(_Node("param" if learnable else "const", (), tensor, None, learnable, name))
        self._params[name] = len(self.nodes) - 1
        return Var(self, len(self.nodes) - 1)

    def const(self, value: Union[Tensor, np.ndarray, Sequence[float]]) -> Var:
        if isinstance(value, Var):
            return value
        if not isinstance(value, Tensor):
            arr = np.asarray(value, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ContractError("constant data must be finite")
            value = Tensor.wrap(arr)
        self.nodes.append(_Node("const", (), value, None, False))
        return Var(self, len(self.nodes) - 1)

    def _record(self, op: str, inputs: Sequence[Var], out: np.ndarray, backward_fn: BackwardFn) -> Var:
        requires_grad = self.record and any(self.nodes[v.id].requires_grad for v in inputs)
        self.nodes.append(
            _Node(op, tuple(v.id for v in inputs), Tensor.wrap(out), backward_fn if requires_grad else None, requires_grad)
        )
        return Var(self, len(self.nodes) - 1)

    def parameters(self) -> Dict[str, Tensor]:
        return {name: self.nodes[i].value for name, i in self._params.items() if self.nodes[i].requires_grad}

    def backward(self, loss: Var) -> Dict[str, np.ndarray]:
        """
        Reverse sweep from a scalar loss. Returns one gradient per learnable
        leaf, in registration order; leaves the loss does not reach get exact zeros.
        """
        if loss.tape is not self:
            raise ContractError("loss belongs to a different tape")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")

        grads: Dict[str, np.ndarray] = {}
        pending: Dict[int, np.ndarray] = {}
        if self.nodes[loss.id].requires_grad:
            pending[loss.id] = np.ones_like(loss.data)

        for node_id in range(loss.id, -1, -1):
            g = pending.pop(node_id, None)
            if g is None:
                continue
            node = self.nodes[node_id]
            if node.backward_fn is None:
                if node.name is not None:
                    grads[node.name] = g
                continue
            needs = tuple(self.nodes[i].requires_grad for i in node.inputs)
            input_grads = node.backward_fn(g, needs)
            for input_id, need, gi in zip(node.inputs, needs, input_grads):
                if not need or gi is None:
                    continue
                if input_id in pending:
                    pending[input_id] = pending[input_id] + gi
                else:
                    pending[input_id] = gi

        result = {}
        for name, node_id in self._params.items():
            node = self.nodes[node_id]
            if not node.requires_grad:
                continue
            result[name] = grads.get(name, np.zeros_like(node.value.data))
        return result


def backward(graph: TapeGraph, loss: Var) -> Dict[str, np.ndarray]:
    return graph.backward(loss)


def _tape_of(*xs) -> TapeGraph:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise ContractError("operation needs at least one tape-bound operand")


def _lift(tape: TapeGraph, x) -> Var:
    return x if isinstance(x, Var) else tape.const(x)


def _check_same_shape(op: str, a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape {list(a.shape)} does not match {list(b.shape)}")


# ---- matrix products ----

def matmul_exact(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Matrix product over the last two axes, accumulated innermost-k from left
    to right starting at 0.0, so it agrees bit-for-bit with a naive triple loop.
    Leading axes must be identical.
    """
    out = np.zeros(a.shape[:-1] + (b.shape[-1],), dtype=np.float64)
    for k in range(a.shape[-1]):
        out += a[..., :, k:k + 1] * b[..., k:k + 1, :]
    return out


def matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    A, B = a.data, b.data
    if A.ndim < 2 or A.ndim != B.ndim or A.shape[:-2] != B.shape[:-2] or A.shape[-1] != B.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {list(A.shape)} x {list(B.shape)}")

    def back(g, needs):
        ga = matmul_exact(g, np.swapaxes(B, -1, -2)) if needs[0] else None
        gb = matmul_exact(np.swapaxes(A, -1, -2), g) if needs[1] else None
        return ga, gb

    return tape._record("matmul", (a, b), matmul_exact(A, B), back)


# ---- elementwise ----

def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_same_shape("add", a.data, b.data)
    return tape._record("add", (a, b), a.data + b.data, lambda g, needs: (g, g))


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_same_shape("sub", a.data, b.data)
    return tape._record("sub", (a, b), a.data - b.data, lambda g, needs: (g, -g))


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    A, B = a.data, b.data
    _check_same_shape("mul", A, B)
    return tape._record("mul", (a, b), A * B, lambda g, needs: (g * B if needs[0] else None, g * A if needs[1] else None))


def scale(x: Var, c: float) -> Var:
    return x.tape._record("scale", (x,), x.data * c, lambda g, needs: (g * c,))


def add_bias(x: Var, bias) -> Var:
    """Adds a length-d vector to every row of a [..., d] array"""
    tape = x.tape
    bias = _lift(tape, bias)
    X, b = x.data, bias.data
    if b.ndim != 1 or b.shape[0] != X.shape[-1]:
        raise DimensionError(f"add_bias: bias {list(b.shape)} does not fit rows of {list(X.shape)}")

    def back(g, needs):
        return g, (g.reshape(-1, X.shape[-1]).sum(axis=0) if needs[1] else None)

    return tape._record("add_bias", (x, bias), X + b, back)


def gelu(x: Var) -> Var:
    X = x.data
    c = math.sqrt(2.0 / math.pi)
    inner = c * (X + 0.044715 * X ** 3)
    t = np.tanh(inner)
    out = 0.5 * X * (1.0 + t)

    def back(g, needs):
        d_inner = c * (1.0 + 3.0 * 0.044715 * X ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * X * (1.0 - t * t) * d_inner),)

    return x.tape._record("gelu", (x,), out, back)


# ---- row-wise normalisations ----

def softmax_rows(x: Var) -> Var:
    X = x.data
    if X.shape[-1] < 1:
        raise ContractError("softmax_rows needs at least one column")
    e = np.exp(X - X.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g, needs):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return x.tape._record("softmax_rows", (x,), y, back)


def layer_norm(x: Var, gamma, beta, eps: float = 1e-6) -> Var:
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be > 0, got {eps}")
    tape = x.tape
    gamma, beta = _lift(tape, gamma), _lift(tape, beta)
    X, G, Bt = x.data, gamma.data, beta.data
    d = X.shape[-1]
    if G.shape != (d,) or Bt.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {list(G.shape)}/{list(Bt.shape)} do not fit width {d}")
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd

    def back(g, needs):
        gx = None
        if needs[0]:
            dxhat = g * G
            gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, d).sum(axis=0) if needs[1] else None
        gb = g.reshape(-1, d).sum(axis=0) if needs[2] else None
        return gx, gg, gb

    return tape._record("layer_norm", (x, gamma, beta), xhat * G + Bt, back)


def l2_normalize_rows(x: Var, eps: float = 1e-8) -> Var:
    """x / max(||x||, eps) along the last axis"""
    X = x.data
    norm = np.sqrt((X * X).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = X / denom
    active = norm > eps

    def back(g, needs):
        projected = (g - y * (g * y).sum(axis=-1, keepdims=True)) / denom
        return (np.where(active, projected, g / eps),)

    return x.tape._record("l2_normalize_rows", (x,), y, back)


# ---- shape plumbing ----

def concat_rows(a, b) -> Var:
    """Rows of a followed by rows of b (axis -2)"""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    A, B = a.data, b.data
    if A.ndim != B.ndim or A.shape[:-2] != B.shape[:-2] or A.shape[-1] != B.shape[-1]:
        raise DimensionError(f"concat_rows: {list(A.shape)} and {list(B.shape)} have different columns")
    p = A.shape[-2]

    def back(g, needs):
        return g[..., :p, :], g[..., p:, :]

    return tape._record("concat_rows", (a, b), np.concatenate([A, B], axis=-2), back)


def reshape(x: Var, shape: Sequence[int]) -> Var:
    X = x.data
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != X.size:
        raise DimensionError(f"reshape: {list(X.shape)} cannot become {list(shape)}")
    return x.tape._record("reshape", (x,), X.reshape(shape), lambda g, needs: (g.reshape(X.shape),))


def permute(x: Var, axes: Sequence[int]) -> Var:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return x.tape._record("permute", (x,), out, lambda g, needs: (np.transpose(g, inverse),))


def transpose(x: Var) -> Var:
    """Swaps the last two axes"""
    axes = list(range(x.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def take(x: Var, axis: int, start: int, stop: int) -> Var:
    X = x.data
    index = [slice(None)] * X.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def back(g, needs):
        full = np.zeros_like(X)
        full[index] = g
        return (full,)

    return x.tape._record("take", (x,), X[index].copy(), back)


def repeat_batch(x: Var, n: int) -> Var:
    """Stacks n copies of x along a new leading axis"""
    X = x.data
    out = np.broadcast_to(X, (n,) + X.shape).copy()

    def back(g, needs):
        acc = np.zeros_like(X)
        for i in range(n):
            acc += g[i]
        return (acc,)

    return x.tape._record("repeat_batch", (x,), out, back)


def gather(x: Var, indices: Sequence[int]) -> Var:
    """Selects x[indices[i]] along the leading axis"""
    X = x.data
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= X.shape[0]):
        raise DimensionError(f"gather index out of range for leading extent {X.shape[0]}")

    def back(g, needs):
        acc = np.zeros_like(X)
        for pos, i in enumerate(idx):
            acc[i] += g[pos]
        return (acc,)

    return x.tape._record("gather", (x,), X[idx].copy(), back)


# ---- reductions ----

def row_sum(x: Var) -> Var:
    X = x.data
    return x.tape._record("row_sum", (x,), X.sum(axis=-1),
                          lambda g, needs: (np.broadcast_to(g[..., None], X.shape).copy(),))


def mean_all(x: Var) -> Var:
    X = x.data
    n = X.size
    out = np.array([X.sum() / n], dtype=np.float64)
    return x.tape._record("mean_all", (x,), out, lambda g, needs: (np.full(X.shape, g[0] / n),))


def masked_cross_entropy(z: Var, allowed: np.ndarray, labels: Sequence[int]) -> Var:
    """
    Mean over rows of -log softmax(z)[y], where the softmax only ranges over
    columns with allowed=True. Excluded columns get exactly zero gradient.
    """
    Z = z.data
    y = np.asarray(labels, dtype=np.int64)
    allowed = np.asarray(allowed, dtype=bool)
    if Z.ndim != 2 or allowed.shape != (Z.shape[1],) or y.shape != (Z.shape[0],):
        raise DimensionError(f"masked_cross_entropy: logits {list(Z.shape)}, mask {list(allowed.shape)}, labels {list(y.shape)}")
    if Z.shape[0] == 0:
        raise ContractError("masked_cross_entropy needs a nonempty batch")
    if not np.all(allowed[y]):
        raise ContractError("a label of the batch is masked out")

    cols = np.flatnonzero(allowed)
    column_of = np.full(Z.shape[1], -1, dtype=np.int64)
    column_of[cols] = np.arange(cols.size)
    zz = Z[:, cols]
    m = zz.max(axis=1, keepdims=True)
    e = np.exp(zz - m)
    s = e.sum(axis=1, keepdims=True)
    rows = np.arange(Z.shape[0])
    target = column_of[y]
    per_row = np.log(s[:, 0]) - (zz[rows, target] - m[:, 0])
    loss = np.array([per_row.sum() / Z.shape[0]], dtype=np.float64)

    def back(g, needs):
        p = e / s
        p[rows, target] -= 1.0
        full = np.zeros_like(Z)
        full[:, cols] = p * (g[0] / Z.shape[0])
        return (full,)

    return z.tape._record("masked_cross_entropy", (z,), loss, back)


# ---- gradient checking ----

def _evaluate(f: Callable[[TapeGraph], Var]) -> float:
    return float(f(TapeGraph(record=False)).data.reshape(-1)[0])


def grad_check_report(
    f: Callable[[TapeGraph], Var],
    params: Dict[str, Tensor],
    step: float = 1e-3,
    frozen: Iterable[str] = (),
) -> Dict[str, float]:
    """
    Per-parameter max of |autodiff - central FD| / max(1, |FD|).
    `f` builds the scalar loss on the tape it is given, registering each
    tensor in `params` with `tape.param(tensor, name)`. Frozen names are skipped.
    """
    if step <= 0:
        raise ContractError(f"grad_check step must be > 0, got {step}")
    frozen = set(frozen)
    tape = TapeGraph(frozen=frozen)
    grads = tape.backward(f(tape))

    report = {}
    for name, tensor in params.items():
        if name in frozen:
            continue
        analytic = grads.get(name, np.zeros_like(tensor.data)).reshape(-1)
        flat = tensor.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            f_plus = _evaluate(f)
            flat[i] = original - step
            f_minus = _evaluate(f)
            flat[i] = original
            fd = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, abs(analytic[i] - fd) / max(1.0, abs(fd)))
        report[name] = worst
    return report


def grad_check(
    f: Callable[[TapeGraph], Var],
    params: Dict[str, Tensor],
    step: float = 1e-3,
    frozen: Iterable[str] = (),
) -> float:
    report = grad_check_report(f, params, step, frozen)
    return max(report.values()) if report else 0.0
