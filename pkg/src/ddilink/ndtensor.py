"""Dense float64 matrices with reverse-mode automatic differentiation.

Eager, micrograd-style engine: each operation computes its result
immediately and records a closure that scatters the output gradient back
to its inputs. Every value is a 2-D float64 array; vectors are single-row
or single-column matrices. There is no implicit broadcasting except
scalar * tensor, so shape mistakes raise instead of silently broadcasting.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "DomainError",
    "ContractError",
    "DiffNode",
    "Parameter",
    "tensor",
    "constant",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "recip",
    "softplus",
    "relu",
    "leaky_relu",
    "scale",
    "shift",
    "clip",
    "concat_cols",
    "concat_rows",
    "gather_rows",
    "scatter_rows",
    "segment_mean",
    "segment_sum",
    "segment_softmax",
    "row_sum",
    "col_mean",
    "add_rowvec",
    "mul_rowvec",
    "scale_rows",
    "l2_normalize_rows",
    "sum_all",
    "mean_all",
    "graph_nodes",
    "backward",
    "zero_grads",
    "finite_diff_check",
]


class DimensionError(ValueError):
    """Operand shapes do not satisfy the operation's contract."""


class DomainError(ValueError):
    """A value lies outside the operation's numeric domain."""


class ContractError(ValueError):
    """A precondition unrelated to shapes or numeric domains was violated."""


def tensor(data) -> np.ndarray:
    """Validate external input and return a C-ordered float64 matrix.

    1-D input becomes a single row. NaN/Inf are rejected here so that any
    non-finite value appearing later can only come from a computation.
    """
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"expected a matrix, got array of shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise DomainError("non-finite value in tensor input")
    return np.ascontiguousarray(arr)


class DiffNode:
    """One node of the computation graph: a value plus gradient plumbing.

    ``grad`` is allocated lazily and always matches ``value`` in shape.
    ``parents`` and the backward closure are set by the operation that
    produced the node; leaves have neither.
    """

    __slots__ = ("value", "grad", "parents", "trainable", "_backward")

    def __init__(self, value: np.ndarray, parents: tuple = (), backward=None, trainable: bool = False):
        self.value = value
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.trainable = trainable
        self._backward: Callable[[], None] | None = backward

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        kind = "param" if self.trainable else ("leaf" if not self.parents else "op")
        return f"DiffNode(shape={self.shape}, {kind})"


class Parameter(DiffNode):
    """A trainable leaf with a stable name for optimizers and checkpoints."""

    __slots__ = ("name",)

    def __init__(self, name: str, value) -> None:
        super().__init__(tensor(value), trainable=True)
        self.name = name

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Parameter({self.name!r}, shape={self.shape})"


def constant(data) -> DiffNode:
    """A non-trainable leaf node (validates finiteness)."""
    return DiffNode(tensor(data))


def _as_index_array(indices, n: int, what: str) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"{what} index out of range for {n} rows")
    return idx


def _flatten_segments(segments: Sequence[Sequence[int]], n: int):
    """Flatten per-target index lists into (flat_indices, segment_ids, counts)."""
    flat: list[int] = []
    seg_ids: list[int] = []
    counts = np.zeros(len(segments), dtype=np.intp)
    for s, members in enumerate(segments):
        counts[s] = len(members)
        flat.extend(members)
        seg_ids.extend([s] * len(members))
    flat_idx = _as_index_array(flat, n, "segment")
    return flat_idx, np.asarray(seg_ids, dtype=np.intp), counts


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def matmul(a: DiffNode, b: DiffNode) -> DiffNode:
    """Matrix product; backward is dL/da = g.b^T and dL/db = a^T.g."""
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.value.shape} vs {b.value.shape}")
    out = DiffNode(a.value @ b.value, parents=(a, b))

    def _backward() -> None:
        g = out.grad
        a.ensure_grad()
        a.grad += g @ b.value.T
        b.ensure_grad()
        b.grad += a.value.T @ g

    out._backward = _backward
    return out


def transpose(a: DiffNode) -> DiffNode:
    out = DiffNode(np.ascontiguousarray(a.value.T), parents=(a,))

    def _backward() -> None:
        a.ensure_grad()
        a.grad += out.grad.T

    out._backward = _backward
    return out


def _binary(a: DiffNode, b: DiffNode, name: str):
    if a.value.shape != b.value.shape:
        raise DimensionError(f"{name} requires equal shapes: {a.value.shape} vs {b.value.shape}")


def add(a: DiffNode, b: DiffNode) -> DiffNode:
    _binary(a, b, "add")
    out = DiffNode(a.value + b.value, parents=(a, b))

    def _backward() -> None:
        a.ensure_grad()
        a.grad += out.grad
        b.ensure_grad()
        b.grad += out.grad

    out._backward = _backward
    return out


def sub(a: DiffNode, b: DiffNode) -> DiffNode:
    _binary(a, b, "sub")
    out = DiffNode(a.value - b.value, parents=(a, b))

    def _backward() -> None:
        a.ensure_grad()
        a.grad += out.grad
        b.ensure_grad()
        b.grad -= out.grad

    out._backward = _backward
    return out


def mul(a: DiffNode, b: DiffNode) -> DiffNode:
    """Elementwise (Hadamard) product of equal-shaped matrices."""
    _binary(a, b, "mul")
    out = DiffNode(a.value * b.value, parents=(a, b))

    def _backward() -> None:
        a.ensure_grad()
        a.grad += out.grad * b.value
        b.ensure_grad()
        b.grad += out.grad * a.value

    out._backward = _backward
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: DiffNode) -> DiffNode:
    s = _sigmoid(a.value)
    out = DiffNode(s, parents=(a,))

    def _backward() -> None:
        a.ensure_grad()
        a.grad += out.grad * s * (1.0 - s)

    out._backward = _backward
    return out


def exp(a: DiffNode) -> DiffNode:
    e = np.exp(a.value)
    out = DiffNode(e, parents=(a,))

    def _backward() -> None:
        a.ensure_grad()
        a.grad += out.grad * e

    out._backward = _backward
    return out


def log(a: DiffNode) -> DiffNode:
    if a.value.size and a.value.min() <= 0.0:
        raise DomainError("log of non-positive value")
    out = DiffNode(np.log(a.value), parents=(a,))

    def _backward() -> None:
        a.ensure_grad()
        a.grad += out.grad / a.value

    out._backward = _backward
    return out


def sqrt(a: DiffNode) -> DiffNode:
    if a.value.size and a.value.min() <= 0.0:
        raise DomainError("sqrt requires strictly positive input (derivative is unbounded at 0)")
    r = np.sqrt(a.value)
    out = DiffNode(r, parents=(a,))

    def _backward() -> None:
        a.ensure_grad()
        a.grad += out.grad * 0.5 / r

    out._backward = _backward
    return out


def recip(a: DiffNode) -> DiffNode:
    if a.value.size and np.any(a.value == 0.0):
        raise DomainError("reciprocal of zero")
    r = 1.0 / a.value
    out = DiffNode(r, parents=(a,))

    def _backward() -> None:
        a.ensure_grad()
        a.grad -= out.grad * r * r

    out._backward = _backward
    return out


def softplus(a: DiffNode) -> DiffNode:
    """log(1 + exp(x)), computed as max(x, 0) + log1p(exp(-|x|))."""
    x = a.value
    out = DiffNode(np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))), parents=(a,))

    def _backward() -> None:
        a.ensure_grad()
        a.grad += out.grad * _sigmoid(x)

    out._backward = _backward
    return out


def relu(a: DiffNode) -> DiffNode:
    out = DiffNode(np.maximum(a.value, 0.0), parents=(a,))

    def _backward() -> None:
        a.ensure_grad()
        a.grad += out.grad * (a.value > 0.0)

    out._backward = _backward
    return out


def leaky_relu(a: DiffNode, slope: float = 0.2) -> DiffNode:
    mask = a.value >= 0.0
    out = DiffNode(np.where(mask, a.value, slope * a.value), parents=(a,))

    def _backward() -> None:
        a.ensure_grad()
        a.grad += out.grad * np.where(mask, 1.0, slope)

    out._backward = _backward
    return out


def scale(a: DiffNode, c: float) -> DiffNode:
    """Scalar multiple c * a (the only scalar-tensor broadcast allowed)."""
    c = float(c)
    out = DiffNode(a.value * c, parents=(a,))

    def _backward() -> None:
        a.ensure_grad()
        a.grad += out.grad * c

    out._backward = _backward
    return out


def shift(a: DiffNode, c: float) -> DiffNode:
    """Add the scalar constant c to every element."""
    out = DiffNode(a.value + float(c), parents=(a,))

    def _backward() -> None:
        a.ensure_grad()
        a.grad += out.grad

    out._backward = _backward
    return out


def clip(a: DiffNode, lo: float, hi: float) -> DiffNode:
    """Clamp into [lo, hi]; gradient passes through only in the interior."""
    if not lo < hi:
        raise ContractError(f"clip bounds must satisfy lo < hi, got [{lo}, {hi}]")
    mask = (a.value >= lo) & (a.value <= hi)
    out = DiffNode(np.clip(a.value, lo, hi), parents=(a,))

    def _backward() -> None:
        a.ensure_grad()
        a.grad += out.grad * mask

    out._backward = _backward
    return out


def concat_cols(a: DiffNode, b: DiffNode) -> DiffNode:
    if a.value.shape[0] != b.value.shape[0]:
        raise DimensionError(f"concat_cols row counts differ: {a.value.shape} vs {b.value.shape}")
    p = a.value.shape[1]
    out = DiffNode(np.concatenate([a.value, b.value], axis=1), parents=(a, b))

    def _backward() -> None:
        a.ensure_grad()
        a.grad += out.grad[:, :p]
        b.ensure_grad()
        b.grad += out.grad[:, p:]

    out._backward = _backward
    return out


def concat_rows(a: DiffNode, b: DiffNode) -> DiffNode:
    if a.value.shape[1] != b.value.shape[1]:
        raise DimensionError(f"concat_rows column counts differ: {a.value.shape} vs {b.value.shape}")
    m = a.value.shape[0]
    out = DiffNode(np.concatenate([a.value, b.value], axis=0), parents=(a, b))

    def _backward() -> None:
        a.ensure_grad()
        a.grad += out.grad[:m]
        b.ensure_grad()
        b.grad += out.grad[m:]

    out._backward = _backward
    return out


def gather_rows(a: DiffNode, indices) -> DiffNode:
    """Select rows by index; backward scatter-adds (repeats accumulate)."""
    idx = _as_index_array(indices, a.value.shape[0], "gather_rows")
    out = DiffNode(a.value[idx], parents=(a,))

    def _backward() -> None:
        a.ensure_grad()
        np.add.at(a.grad, idx, out.grad)

    out._backward = _backward
    return out


def scatter_rows(a: DiffNode, indices, n_rows: int) -> DiffNode:
    """Place row j of ``a`` at position indices[j] in an n_rows output.

    Indices must be unique; rows not written stay zero.
    """
    idx = _as_index_array(indices, n_rows, "scatter_rows")
    if idx.size != a.value.shape[0]:
        raise DimensionError(f"scatter_rows: {idx.size} indices for {a.value.shape[0]} rows")
    if idx.size != np.unique(idx).size:
        raise ContractError("scatter_rows indices must be unique")
    val = np.zeros((n_rows, a.value.shape[1]))
    val[idx] = a.value
    out = DiffNode(val, parents=(a,))

    def _backward() -> None:
        a.ensure_grad()
        a.grad += out.grad[idx]

    out._backward = _backward
    return out


def segment_sum(a: DiffNode, segments: Sequence[Sequence[int]]) -> DiffNode:
    """Row s of the output is the sum of ``a`` rows listed in segments[s].

    An empty segment yields a zero row.
    """
    flat_idx, seg_ids, _ = _flatten_segments(segments, a.value.shape[0])
    val = np.zeros((len(segments), a.value.shape[1]))
    np.add.at(val, seg_ids, a.value[flat_idx])
    out = DiffNode(val, parents=(a,))

    def _backward() -> None:
        a.ensure_grad()
        np.add.at(a.grad, flat_idx, out.grad[seg_ids])

    out._backward = _backward
    return out


def segment_mean(a: DiffNode, segments: Sequence[Sequence[int]]) -> DiffNode:
    """Row s is the mean over segments[s]; empty segments yield zero rows."""
    flat_idx, seg_ids, counts = _flatten_segments(segments, a.value.shape[0])
    inv = np.zeros(len(segments))
    nonempty = counts > 0
    inv[nonempty] = 1.0 / counts[nonempty]
    val = np.zeros((len(segments), a.value.shape[1]))
    np.add.at(val, seg_ids, a.value[flat_idx])
    val *= inv[:, None]
    out = DiffNode(val, parents=(a,))

    def _backward() -> None:
        a.ensure_grad()
        np.add.at(a.grad, flat_idx, out.grad[seg_ids] * inv[seg_ids, None])

    out._backward = _backward
    return out


def segment_softmax(scores: DiffNode, segments: Sequence[Sequence[int]]) -> DiffNode:
    """Softmax within each segment of a column of scores.

    ``segments`` must partition the score rows exactly. Computed with
    per-segment max subtraction so large scores cannot overflow.
    """
    if scores.value.shape[1] != 1:
        raise DimensionError(f"segment_softmax expects a column, got {scores.value.shape}")
    n = scores.value.shape[0]
    flat_idx, seg_ids, _ = _flatten_segments(segments, n)
    if flat_idx.size != n or np.unique(flat_idx).size != n:
        raise ContractError("segments must cover every score row exactly once")
    if n == 0:
        out = DiffNode(np.zeros((0, 1)), parents=(scores,))
        out._backward = lambda: scores.ensure_grad()
        return out

    s = scores.value[flat_idx, 0]
    seg_max = np.full(len(segments), -np.inf)
    np.maximum.at(seg_max, seg_ids, s)
    ex = np.exp(s - seg_max[seg_ids])
    denom = np.zeros(len(segments))
    np.add.at(denom, seg_ids, ex)
    alpha = ex / denom[seg_ids]
    val = np.zeros((n, 1))
    val[flat_idx, 0] = alpha
    out = DiffNode(val, parents=(scores,))

    def _backward() -> None:
        scores.ensure_grad()
        g = out.grad[flat_idx, 0]
        # d/ds softmax: alpha * (g - sum_seg(g * alpha))
        dot = np.zeros(len(segments))
        np.add.at(dot, seg_ids, g * alpha)
        ds = alpha * (g - dot[seg_ids])
        np.add.at(scores.grad[:, 0], flat_idx, ds)

    out._backward = _backward
    return out


def row_sum(a: DiffNode) -> DiffNode:
    """Sum each row into a column vector [n x 1]."""
    out = DiffNode(a.value.sum(axis=1, keepdims=True), parents=(a,))

    def _backward() -> None:
        a.ensure_grad()
        a.grad += out.grad  # [n x 1] broadcasts over columns

    out._backward = _backward
    return out


def col_mean(a: DiffNode) -> DiffNode:
    """Mean over rows into a row vector [1 x d]."""
    n = a.value.shape[0]
    if n == 0:
        raise DimensionError("col_mean of an empty matrix")
    out = DiffNode(a.value.mean(axis=0, keepdims=True), parents=(a,))

    def _backward() -> None:
        a.ensure_grad()
        a.grad += out.grad / n

    out._backward = _backward
    return out


def add_rowvec(a: DiffNode, v: DiffNode) -> DiffNode:
    """Add the row vector v [1 x d] to every row of a [n x d]."""
    if v.value.shape != (1, a.value.shape[1]):
        raise DimensionError(f"add_rowvec expects [1 x {a.value.shape[1]}], got {v.value.shape}")
    out = DiffNode(a.value + v.value, parents=(a, v))

    def _backward() -> None:
        a.ensure_grad()
        a.grad += out.grad
        v.ensure_grad()
        v.grad += out.grad.sum(axis=0, keepdims=True)

    out._backward = _backward
    return out


def mul_rowvec(a: DiffNode, v: DiffNode) -> DiffNode:
    """Multiply every row of a [n x d] elementwise by v [1 x d]."""
    if v.value.shape != (1, a.value.shape[1]):
        raise DimensionError(f"mul_rowvec expects [1 x {a.value.shape[1]}], got {v.value.shape}")
    out = DiffNode(a.value * v.value, parents=(a, v))

    def _backward() -> None:
        a.ensure_grad()
        a.grad += out.grad * v.value
        v.ensure_grad()
        v.grad += (out.grad * a.value).sum(axis=0, keepdims=True)

    out._backward = _backward
    return out


def scale_rows(a: DiffNode, s: DiffNode) -> DiffNode:
    """Scale row i of a [n x d] by the scalar s[i] from a column [n x 1]."""
    if s.value.shape != (a.value.shape[0], 1):
        raise DimensionError(f"scale_rows expects [{a.value.shape[0]} x 1], got {s.value.shape}")
    out = DiffNode(a.value * s.value, parents=(a, s))

    def _backward() -> None:
        a.ensure_grad()
        a.grad += out.grad * s.value
        s.ensure_grad()
        s.grad += (out.grad * a.value).sum(axis=1, keepdims=True)

    out._backward = _backward
    return out


def l2_normalize_rows(a: DiffNode) -> DiffNode:
    """Scale each row to unit L2 norm; all-zero rows stay zero."""
    norms = np.sqrt((a.value * a.value).sum(axis=1, keepdims=True))
    safe = np.where(norms > 0.0, norms, 1.0)
    y = a.value / safe
    out = DiffNode(y, parents=(a,))

    def _backward() -> None:
        a.ensure_grad()
        g = out.grad
        dots = (g * y).sum(axis=1, keepdims=True)
        contrib = (g - y * dots) / safe
        contrib[norms[:, 0] == 0.0] = 0.0
        a.grad += contrib

    out._backward = _backward
    return out


def sum_all(a: DiffNode) -> DiffNode:
    out = DiffNode(np.array([[a.value.sum()]]), parents=(a,))

    def _backward() -> None:
        a.ensure_grad()
        a.grad += out.grad[0, 0]

    out._backward = _backward
    return out


def mean_all(a: DiffNode) -> DiffNode:
    if a.value.size == 0:
        raise DimensionError("mean_all of an empty matrix")
    n = a.value.size
    out = DiffNode(np.array([[a.value.sum() / n]]), parents=(a,))

    def _backward() -> None:
        a.ensure_grad()
        a.grad += out.grad[0, 0] / n

    out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def graph_nodes(root: DiffNode) -> list[DiffNode]:
    """All nodes reachable from root, parents before children (topological)."""
    order: list[DiffNode] = []
    visited: set[int] = set()
    stack: list[tuple[DiffNode, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order


def backward(root: DiffNode) -> int:
    """Accumulate d(root)/d(node) into .grad for every reachable node.

    Requires a scalar root. Grads add onto whatever is already stored, so
    call zero_grads between passes that should not accumulate. Returns the
    number of nodes visited (each exactly once).
    """
    if root.value.size != 1:
        raise ContractError(f"backward requires a scalar root, got shape {root.value.shape}")
    order = graph_nodes(root)
    root.ensure_grad()
    root.grad += 1.0
    for node in reversed(order):
        if node._backward is not None:
            node.ensure_grad()
            node._backward()
    return len(order)


def zero_grads(nodes: Iterable[DiffNode]) -> None:
    for node in nodes:
        node.zero_grad()


def finite_diff_check(
    f: Callable[[], DiffNode],
    params: Sequence[DiffNode],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int = 64,
    seed: int = 0,
) -> dict:
    """Compare backward() gradients of the scalar f() against central differences.

    ``f`` must rebuild its graph from the current parameter values on every
    call and be deterministic. For tensors larger than ``max_coords``
    entries, a seeded sample of coordinates is checked. Relative error uses
    a small floor in the denominator so near-zero gradients are judged on
    an absolute scale.

    Returns {"max_rel_err", "pass", "per_param", "n_coords"}.
    """
    if h <= 0:
        raise ContractError("finite_diff_check requires h > 0")
    v1 = f().value
    v2 = f().value
    if not np.array_equal(v1, v2):
        raise ContractError("f is not deterministic under fixed inputs")

    root = f()
    if root.value.size != 1:
        raise ContractError("finite_diff_check requires a scalar-valued f")
    zero_grads(params)
    backward(root)
    analytic = [p.ensure_grad().copy() for p in params]

    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    max_rel = 0.0
    n_checked = 0
    for k, p in enumerate(params):
        flat = p.value.reshape(-1)
        n = flat.size
        if n <= max_coords:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = float(f().value[0, 0])
            flat[c] = orig - h
            down = float(f().value[0, 0])
            flat[c] = orig
            fd = (up - down) / (2.0 * h)
            a = float(analytic[k].reshape(-1)[c])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            worst = max(worst, rel)
            n_checked += 1
        name = getattr(p, "name", f"param{k}")
        per_param[name] = worst
        max_rel = max(max_rel, worst)
    return {
        "max_rel_err": max_rel,
        "pass": bool(max_rel < tol),
        "per_param": per_param,
        "n_coords": n_checked,
    }
