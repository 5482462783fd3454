"""Dense float64 tensors with reverse-mode automatic differentiation.

All differentiable computation in this package runs through a ``Tape``:
a define-by-run record of primitive operations, rebuilt for every
forward pass. ``backward`` replays the record in reverse to produce
exact gradients for any subset of leaf tensors.

The primitive set is deliberately closed (see ``PRIMITIVES``). There is
no implicit broadcasting: shapes must match exactly, and any expansion
goes through the explicit ``broadcast_to`` primitive. Silent shape
coercion is the classic source of wrong gradients in hand-rolled
engines, so we refuse it.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DomainError",
    "GradientMap",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "broadcast_to",
    "concat",
    "div",
    "exp",
    "finite_diff_check",
    "log",
    "matmul",
    "maximum",
    "mean",
    "mul",
    "primitive_forward",
    "relu",
    "scalar_mul",
    "slice_",
    "softmax",
    "sqrt",
    "sub",
    "sum_",
    "tensor_sum",
    "transpose",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate a primitive's shape rule."""


class DomainError(ValueError):
    """Raised for log/sqrt applied outside their domain."""


def _as_f64(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Node:
    """One recorded primitive: op name, input ids, output value, saved meta."""

    __slots__ = ("op", "inputs", "value", "meta", "name")

    def __init__(self, op, inputs, value, meta=None, name=None):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.meta = meta
        self.name = name


class Tensor:
    """Handle to one node on a tape. Cheap to copy, never mutated."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def data(self) -> np.ndarray:
        return self.tape._nodes[self.id].value

    @property
    def shape(self) -> tuple:
        return self.tape._nodes[self.id].value.shape

    @property
    def ndim(self) -> int:
        return self.tape._nodes[self.id].value.ndim

    @property
    def size(self) -> int:
        return self.tape._nodes[self.id].value.size

    def item(self) -> float:
        return float(self.tape._nodes[self.id].value)

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.shape})"

    # Operator sugar. Tensors on the same tape only; Python floats go
    # through scalar_mul so constants never sneak in as silent leaves.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    def __rmul__(self, other):
        return scalar_mul(self, float(other))

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __getitem__(self, key):
        return slice_(self, key)


class Tape:
    """Append-only record of primitives; one forward pass per instance.

    A tape is owned by a single thread for its lifetime. Leaves are
    created with :meth:`leaf` (differentiable parameters / inputs) or
    :meth:`constant` (data that never needs a gradient; same node kind,
    just a naming convention).
    """

    def __init__(self):
        self._nodes: list[Node] = []

    def __len__(self):
        return len(self._nodes)

    def leaf(self, value, name: str | None = None) -> Tensor:
        arr = _as_f64(value)
        self._nodes.append(Node("leaf", (), arr, None, name))
        return Tensor(self, len(self._nodes) - 1)

    def constant(self, value) -> Tensor:
        return self.leaf(value)

    def node(self, node_id: int) -> Node:
        return self._nodes[node_id]

    def _record(self, op, inputs, value, meta=None) -> Tensor:
        self._nodes.append(Node(op, tuple(t.id for t in inputs), value, meta))
        return Tensor(self, len(self._nodes) - 1)


def _same_tape(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ValueError("operands recorded on different tapes")
    return tape


def _require_same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} must match exactly")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    _require_same_shape("add", a, b)
    return tape._record("add", (a, b), a.data + b.data)


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    _require_same_shape("sub", a, b)
    return tape._record("sub", (a, b), a.data - b.data)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    tape = _same_tape(a, b)
    _require_same_shape("mul", a, b)
    return tape._record("mul", (a, b), a.data * b.data)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return a.tape._record("scalar_mul", (a,), a.data * c, c)


def div(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    _require_same_shape("div", a, b)
    return tape._record("div", (a, b), a.data / b.data)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product following numpy semantics for 1-D/2-D operands."""
    tape = _same_tape(a, b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: operands must be 1-D or 2-D, got {a.shape} @ {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[0]
    if ka != kb:
        raise ShapeError(f"matmul: inner dims disagree for {a.shape} @ {b.shape}")
    return tape._record("matmul", (a, b), np.matmul(a.data, b.data))


def relu(a: Tensor) -> Tensor:
    return a.tape._record("relu", (a,), np.maximum(a.data, 0.0))


def exp(a: Tensor) -> Tensor:
    return a.tape._record("exp", (a,), np.exp(a.data))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log: input has nonpositive entries")
    return a.tape._record("log", (a,), np.log(a.data))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("sqrt: input has nonpositive entries")
    return a.tape._record("sqrt", (a,), np.sqrt(a.data))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max. Ties route their gradient to the first operand."""
    tape = _same_tape(a, b)
    _require_same_shape("maximum", a, b)
    return tape._record("maximum", (a, b), np.maximum(a.data, b.data))


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    value = np.sum(a.data, axis=axis, keepdims=keepdims)
    return a.tape._record("sum", (a,), value, (axis, keepdims, a.shape))


# ``sum_`` reads awkwardly at some call sites; both names are the same op.
tensor_sum = sum_


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    value = np.mean(a.data, axis=axis, keepdims=keepdims)
    return a.tape._record("mean", (a,), value, (axis, keepdims, a.shape))


def softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    """Max-subtracted softmax. Shared by the tape primitive and the
    no-tape fast paths so both produce bitwise-identical values."""
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int) -> Tensor:
    value = softmax_np(a.data, axis)
    return a.tape._record("softmax", (a,), value, axis)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: need at least one input")
    tape = _same_tape(*tensors)
    value = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = tuple(t.shape[axis] for t in tensors)
    return tape._record("concat", tuple(tensors), value, (axis, sizes))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D input, got shape {a.shape}")
    return a.tape._record("transpose", (a,), a.data.T.copy())


def _normalize_key(key, shape):
    """Turn a getitem key into per-axis (start, stop) pairs, full axes kept."""
    if not isinstance(key, tuple):
        key = (key,)
    if len(key) > len(shape):
        raise ShapeError(f"slice: too many indices for shape {shape}")
    slices = []
    for axis, dim in enumerate(shape):
        if axis < len(key):
            k = key[axis]
            if isinstance(k, int):
                k = slice(k, k + 1)  # keep the axis; no dim dropping
            if not isinstance(k, slice) or k.step not in (None, 1):
                raise ShapeError("slice: only contiguous ranges are supported")
            start, stop, _ = k.indices(dim)
            if stop < start:
                stop = start
            slices.append((start, stop))
        else:
            slices.append((0, dim))
    return tuple(slices)


def slice_(a: Tensor, key) -> Tensor:
    """Contiguous sub-block. Integer indices keep their axis (no squeeze)."""
    bounds = _normalize_key(key, a.shape)
    view = a.data[tuple(slice(s, e) for s, e in bounds)]
    return a.tape._record("slice", (a,), view.copy(), (bounds, a.shape))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        value = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot expand {a.shape} to {shape}") from None
    return a.tape._record("broadcast", (a,), np.ascontiguousarray(value), (a.shape, shape))


_PRIMITIVE_TABLE = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar_mul": scalar_mul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sum": sum_,
    "mean": mean,
    "softmax": softmax,
    "concat": concat,
    "transpose": transpose,
    "slice": slice_,
    "broadcast": broadcast_to,
    "sqrt": sqrt,
    "div": div,
    "maximum": maximum,
}

PRIMITIVES = tuple(sorted(_PRIMITIVE_TABLE))


def primitive_forward(kind: str, *inputs, **kwargs):
    """Uniform name-dispatched entry point over every primitive.

    Call-site code uses the named functions (or operator sugar); this
    wrapper exists so tests can sweep the whole primitive set.
    """
    try:
        fn = _PRIMITIVE_TABLE[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward rules
# ---------------------------------------------------------------------------

def _bw_add(node, g, vals):
    return (g, g)


def _bw_sub(node, g, vals):
    return (g, -g)


def _bw_mul(node, g, vals):
    a, b = vals
    return (g * b, g * a)


def _bw_scalar_mul(node, g, vals):
    return (g * node.meta,)


def _bw_div(node, g, vals):
    a, b = vals
    return (g / b, -g * a / (b * b))


def _bw_matmul(node, g, vals):
    a, b = vals
    if a.ndim == 2 and b.ndim == 2:
        return (np.matmul(g, b.T), np.matmul(a.T, g))
    if a.ndim == 2 and b.ndim == 1:
        return (np.outer(g, b), np.matmul(a.T, g))
    if a.ndim == 1 and b.ndim == 2:
        return (np.matmul(b, g), np.outer(a, g))
    # 1-D @ 1-D -> scalar
    return (g * b, g * a)


def _bw_relu(node, g, vals):
    (a,) = vals
    return (g * (a > 0.0),)


def _bw_exp(node, g, vals):
    return (g * node.value,)


def _bw_log(node, g, vals):
    (a,) = vals
    return (g / a,)


def _bw_sqrt(node, g, vals):
    return (g * (0.5 / node.value),)


def _bw_maximum(node, g, vals):
    a, b = vals
    take_a = a >= b
    return (g * take_a, g * ~take_a)


def _expand_reduced(g, axis, keepdims, in_shape):
    if axis is None:
        return np.broadcast_to(g, in_shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, in_shape)


def _bw_sum(node, g, vals):
    axis, keepdims, in_shape = node.meta
    return (np.ascontiguousarray(_expand_reduced(g, axis, keepdims, in_shape)),)


def _bw_mean(node, g, vals):
    axis, keepdims, in_shape = node.meta
    n = np.prod(in_shape) if axis is None else in_shape[axis]
    return (np.ascontiguousarray(_expand_reduced(g, axis, keepdims, in_shape)) / n,)


def _bw_softmax(node, g, vals):
    axis = node.meta
    s = node.value
    inner = np.sum(g * s, axis=axis, keepdims=True)
    return (s * (g - inner),)


def _bw_concat(node, g, vals):
    axis, sizes = node.meta
    grads = []
    offset = 0
    for size in sizes:
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(offset, offset + size)
        grads.append(np.ascontiguousarray(g[tuple(sl)]))
        offset += size
    return tuple(grads)


def _bw_transpose(node, g, vals):
    return (g.T.copy(),)


def _bw_slice(node, g, vals):
    bounds, in_shape = node.meta
    out = np.zeros(in_shape, dtype=np.float64)
    out[tuple(slice(s, e) for s, e in bounds)] = g
    return (out,)


def _bw_broadcast(node, g, vals):
    in_shape, out_shape = node.meta
    padded = (1,) * (len(out_shape) - len(in_shape)) + tuple(in_shape)
    reduce_axes = tuple(
        i for i, (pi, oi) in enumerate(zip(padded, out_shape)) if pi == 1 and oi != 1
    )
    if reduce_axes:
        g = np.sum(g, axis=reduce_axes, keepdims=True)
    return (g.reshape(in_shape),)


_BACKWARD_TABLE = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "scalar_mul": _bw_scalar_mul,
    "div": _bw_div,
    "matmul": _bw_matmul,
    "relu": _bw_relu,
    "exp": _bw_exp,
    "log": _bw_log,
    "sqrt": _bw_sqrt,
    "maximum": _bw_maximum,
    "sum": _bw_sum,
    "mean": _bw_mean,
    "softmax": _bw_softmax,
    "concat": _bw_concat,
    "transpose": _bw_transpose,
    "slice": _bw_slice,
    "broadcast": _bw_broadcast,
}


class GradientMap:
    """Gradients keyed by leaf id; matching shapes guaranteed.

    Leaves never reached by the objective hold exact zeros.
    """

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def get(self, leaf: Tensor) -> np.ndarray:
        return self._grads[leaf.id]

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            return self._grads[key.id]
        return self._grads[key]

    def __contains__(self, key):
        node_id = key.id if isinstance(key, Tensor) else key
        return node_id in self._grads

    def __len__(self):
        return len(self._grads)

    def ids(self):
        return self._grads.keys()

    def global_norm(self) -> float:
        total = 0.0
        for g in self._grads.values():
            total += float(np.sum(g * g))
        return float(np.sqrt(total))


def _accumulate_cotangents(tape: Tape, seed_id: int, seed_value: np.ndarray) -> dict[int, np.ndarray]:
    """Shared reverse sweep. Accumulation never mutates in place, so
    aliased cotangents (add fans the same array to both inputs) stay safe."""
    nodes = tape._nodes
    cotangents: dict[int, np.ndarray] = {seed_id: seed_value}
    for node_id in range(seed_id, -1, -1):
        g = cotangents.get(node_id)
        if g is None:
            continue
        node = nodes[node_id]
        if node.op == "leaf":
            continue
        vals = tuple(nodes[i].value for i in node.inputs)
        input_grads = _BACKWARD_TABLE[node.op](node, g, vals)
        for input_id, ig in zip(node.inputs, input_grads):
            prev = cotangents.get(input_id)
            if prev is None:
                cotangents[input_id] = ig
            else:
                cotangents[input_id] = prev + ig
    return cotangents


def _check_wrt_leaves(tape: Tape, wrt) -> list[Tensor]:
    wrt = list(wrt)
    for t in wrt:
        if t.tape is not tape:
            raise ValueError("wrt tensor recorded on a different tape")
        if tape._nodes[t.id].op != "leaf":
            raise ValueError(f"wrt id {t.id} is not a tape leaf")
    return wrt


def backward(objective: Tensor, wrt) -> GradientMap:
    """Reverse-mode gradients of a scalar objective for the given leaves.

    Values used more than once accumulate by addition; leaves the
    objective never touches come back as zeros of the leaf's shape.
    """
    tape = objective.tape
    if objective.ndim != 0:
        raise ShapeError(f"backward: objective must be scalar, got shape {objective.shape}")
    wrt = _check_wrt_leaves(tape, wrt)
    cotangents = _accumulate_cotangents(tape, objective.id, np.array(1.0))
    grads = {}
    for t in wrt:
        g = cotangents.get(t.id)
        grads[t.id] = np.zeros_like(t.data) if g is None else np.ascontiguousarray(g)
    return GradientMap(grads)


def backward_with_cotangents(objective: Tensor, wrt) -> tuple[GradientMap, dict[int, np.ndarray]]:
    """backward() that also exposes every interior cotangent by node id.

    The meta-gradient path needs the cotangents arriving at each linear
    layer's pre-activation to recover per-step policy score gradients.
    """
    tape = objective.tape
    if objective.ndim != 0:
        raise ShapeError(f"backward: objective must be scalar, got shape {objective.shape}")
    wrt = _check_wrt_leaves(tape, wrt)
    cotangents = _accumulate_cotangents(tape, objective.id, np.array(1.0))
    grads = {}
    for t in wrt:
        g = cotangents.get(t.id)
        grads[t.id] = np.zeros_like(t.data) if g is None else np.ascontiguousarray(g)
    return GradientMap(grads), cotangents


def vector_jacobian_product(outputs: Tensor, cotangent, wrt) -> GradientMap:
    """v^T J for the map leaves -> outputs, without forming J.

    Bitwise-identical to ``backward(sum(outputs * cotangent), wrt)`` on
    the same tape: the seed v propagates through the same reverse sweep
    that a recorded mul-then-sum objective would produce (1.0 * v == v
    exactly in IEEE754).
    """
    tape = outputs.tape
    cot = cotangent.data if isinstance(cotangent, Tensor) else _as_f64(cotangent)
    if cot.shape != outputs.shape:
        raise ShapeError(
            f"vector_jacobian_product: cotangent shape {cot.shape} "
            f"!= outputs shape {outputs.shape}"
        )
    wrt = _check_wrt_leaves(tape, wrt)
    cotangents = _accumulate_cotangents(tape, outputs.id, np.ascontiguousarray(cot))
    grads = {}
    for t in wrt:
        g = cotangents.get(t.id)
        grads[t.id] = np.zeros_like(t.data) if g is None else np.ascontiguousarray(g)
    return GradientMap(grads)


def finite_diff_check(f, x, step: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central differences.

    ``f`` maps a leaf Tensor to a scalar Tensor and must be a pure
    deterministic function of it. Relative error uses the customary
    ``|ad - fd| / max(1, |fd|)`` guard so near-zero components do not
    blow up the ratio.
    """
    x = np.ascontiguousarray(_as_f64(x))

    tape = Tape()
    xt = tape.leaf(x)
    y = f(xt)
    if y.ndim != 0:
        raise ShapeError("finite_diff_check: f must return a scalar")
    g_ad = backward(y, [xt]).get(xt)

    def eval_at(arr: np.ndarray) -> float:
        t = Tape()
        return f(t.leaf(arr)).item()

    g_fd = np.zeros_like(x)
    flat = x.reshape(-1)
    fd_flat = g_fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = eval_at(x)
        flat[i] = orig - step
        lo = eval_at(x)
        flat[i] = orig
        fd_flat[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(1.0, np.abs(g_fd))
    return float(np.max(np.abs(g_ad - g_fd) / denom)) if x.size else 0.0
