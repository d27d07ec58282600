"""Dense/sparse linear algebra with a reverse-mode tape and Adam.

Everything is float64 and 2-D.  A :class:`Tensor` is an immutable matrix; it
becomes *traced* when it is created through :meth:`Tape.watch` or produced
by an op whose inputs are traced.  Ops on untraced inputs are plain numpy
computations and leave nothing on any tape.

Typical use::

    tape = Tape()
    w = tape.watch(w0)
    loss = sum_all(relu(matmul(x, w)))
    tape.backward(loss)
    tape.grad(w)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

KL_EPS = 1e-12


class ContractError(ValueError):
    """Raised when an operation's precondition is violated."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable float64 matrix, optionally traced on a :class:`Tape`."""

    __slots__ = ("data", "_tape", "_index")

    def __init__(self, data, _tape: "Tape | None" = None, _index: int | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ContractError(f"Tensor must be at most 2-D, got {arr.ndim}-D")
        self.data = _readonly(arr)
        self._tape = _tape
        self._index = _index

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape=None, index=None) -> "Tensor":
        # no copy: caller hands over ownership of a fresh array
        t = cls.__new__(cls)
        t.data = _readonly(arr)
        t._tape = tape
        t._index = index
        return t

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def traced(self) -> bool:
        return self._tape is not None

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f", traced@{self._index}" if self.traced else ""
        return f"Tensor({self.rows}x{self.cols}{tag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Square CSR matrix.  Validated on construction."""

    n: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        rp = np.asarray(self.row_ptr, dtype=np.int64)
        ci = np.asarray(self.col_idx, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        if rp.shape != (self.n + 1,):
            raise ContractError("row_ptr must have length n+1")
        if rp[0] != 0 or np.any(np.diff(rp) < 0) or rp[-1] != ci.size:
            raise ContractError("row_ptr must start at 0, be nondecreasing and end at nnz")
        if vals.shape != ci.shape:
            raise ContractError("values and col_idx length differ")
        if ci.size and (ci.min() < 0 or ci.max() >= self.n):
            raise ContractError("col_idx out of range")
        if ci.size > 1:
            row_of = np.repeat(np.arange(self.n), np.diff(rp))
            same_row = row_of[1:] == row_of[:-1]
            if np.any(np.diff(ci)[same_row] <= 0):
                raise ContractError("col_idx must be strictly increasing within each row")
        object.__setattr__(self, "row_ptr", _readonly(rp))
        object.__setattr__(self, "col_idx", _readonly(ci))
        object.__setattr__(self, "values", _readonly(vals))

    @classmethod
    def from_coo(cls, n: int, rows, cols, values=None) -> "SparseMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if values is None:
            values = np.ones(rows.size)
        values = np.asarray(values, dtype=np.float64)
        order = np.lexsort((cols, rows))
        rows, cols, values = rows[order], cols[order], values[order]
        if rows.size > 1:
            dup = (np.diff(rows) == 0) & (np.diff(cols) == 0)
            if dup.any():
                raise ContractError("duplicate entries in COO input")
        if rows.size and (rows.min() < 0 or rows.max() >= n):
            raise ContractError("row index out of range")
        row_ptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n), out=row_ptr[1:])
        return cls(n, row_ptr, cols, values)

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        return cls(n, np.arange(n + 1), np.arange(n), np.ones(n))

    @property
    def nnz(self) -> int:
        return int(self.col_idx.size)

    def row_indices(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), np.diff(self.row_ptr))

    @cached_property
    def _csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.col_idx, self.row_ptr), shape=(self.n, self.n))

    @cached_property
    def _csr_t(self) -> sp.csr_matrix:
        return self._csr.T.tocsr()

    def dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        out[self.row_indices(), self.col_idx] = self.values
        return out

    def __eq__(self, other):
        if not isinstance(other, SparseMatrix):
            return NotImplemented
        return (
            self.n == other.n
            and np.array_equal(self.row_ptr, other.row_ptr)
            and np.array_equal(self.col_idx, other.col_idx)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    inputs: tuple
    backward: object  # callable(g) -> tuple of input grads, or None for leaves
    shape: tuple


class Tape:
    """Append-only record of traced operations.

    One tape per training step; :meth:`backward` may be called once.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._grads: dict[int, np.ndarray] | None = None

    def __len__(self):
        return len(self._nodes)

    @property
    def consumed(self) -> bool:
        return self._grads is not None

    def watch(self, value) -> Tensor:
        """Register ``value`` as a differentiable leaf and return its traced tensor."""
        if self.consumed:
            raise ContractError("tape already consumed")
        data = value.data if isinstance(value, Tensor) else value
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        self._nodes.append(_Node((), None, arr.shape))
        return Tensor._wrap(arr, self, len(self._nodes) - 1)

    def _record(self, out: np.ndarray, inputs: tuple, backward) -> Tensor:
        if self.consumed:
            raise ContractError("tape already consumed")
        self._nodes.append(_Node(inputs, backward, out.shape))
        return Tensor._wrap(out, self, len(self._nodes) - 1)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        if loss._tape is not self:
            raise ContractError("loss is not recorded on this tape")
        if loss.shape != (1, 1):
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        if self.consumed:
            raise ContractError("tape already consumed")
        adj: dict[int, np.ndarray] = {loss._index: np.ones((1, 1))}
        leaves: dict[int, np.ndarray] = {}
        for i in range(loss._index, -1, -1):
            g = adj.pop(i, None)
            if g is None:
                continue
            node = self._nodes[i]
            if node.backward is None:
                leaves[i] = g
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or inp is None or inp._tape is not self:
                    continue
                j = inp._index
                if j in adj:
                    adj[j] = adj[j] + gi
                else:
                    adj[j] = gi
        self._grads = leaves
        return leaves

    def grad(self, t: Tensor) -> np.ndarray | None:
        """Adjoint of a watched leaf after :meth:`backward`; ``None`` if it got none."""
        if self._grads is None:
            raise ContractError("backward() has not run on this tape")
        if t._tape is not self:
            return None
        return self._grads.get(t._index)


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t._tape is not None:
            if tape is not None and t._tape is not tape:
                raise ContractError("inputs are traced on different tapes")
            tape = t._tape
    return tape


def _result(out: np.ndarray, inputs: tuple, backward) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor._wrap(out)
    return tape._record(out, inputs, backward)


# ---------------------------------------------------------------------------
# kernels


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # numpy's own sum-of-products loop rather than BLAS: row i of the result
    # depends only on row i of ``a``, whatever the row count or blocking.
    return np.einsum("ik,kj->ij", a, b, optimize=False)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise ContractError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = _dot(g, bd.T) if a.traced else None
        gb = ad.T @ g if b.traced else None
        return ga, gb

    return _result(_dot(ad, bd), (a, b), back)


def spmm(s: SparseMatrix, x: Tensor) -> Tensor:
    x = as_tensor(x)
    if s.n != x.rows:
        raise ContractError(f"spmm dimension mismatch: {s.n}x{s.n} x {x.shape}")
    out = np.asarray(s._csr @ x.data)

    def back(g):
        return (np.asarray(s._csr_t @ g),)

    return _result(out, (x,), back)


def _check_same(a: Tensor, b: Tensor, name: str):
    if a.shape != b.shape:
        raise ContractError(f"{name} shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a 1 x cols row vector to every row of ``x``."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.shape != (1, x.cols):
        raise ContractError(f"bias must be 1x{x.cols}, got {bias.shape}")
    return _result(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0, keepdims=True)))


def take_rows(x: Tensor, idx) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    n = x.rows

    def back(g):
        out = np.zeros((n, g.shape[1]))
        np.add.at(out, idx, g)
        return (out,)

    return _result(x.data[idx], (x,), back)


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _result(np.array([[x.data.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),))


def row_softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ContractError("temperature must be positive")
    x = as_tensor(x)
    z = x.data / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)) / temperature,)

    return _result(p, (x,), back)


def _check_prob_rows(t: Tensor, name: str):
    d = t.data
    if np.any(d < 0) or np.any(np.abs(d.sum(axis=1) - 1.0) > 1e-6):
        raise ContractError(f"{name}: every row must be a probability vector")


def kl_rows(p: Tensor, q: Tensor) -> Tensor:
    """Mean over rows of KL(p_i || q_i); ``q`` is clamped at 1e-12 inside the log."""
    p, q = as_tensor(p), as_tensor(q)
    _check_same(p, q, "kl_rows")
    _check_prob_rows(p, "kl_rows p")
    _check_prob_rows(q, "kl_rows q")
    pd, qd = p.data, q.data
    rows = pd.shape[0]
    qc = np.maximum(qd, KL_EPS)
    pos = pd > 0
    logp = np.log(np.where(pos, pd, 1.0))
    logq = np.log(qc)
    terms = np.where(pos, pd * (logp - logq), 0.0)
    value = np.array([[terms.sum() / rows]])

    def back(g):
        c = g[0, 0] / rows
        gp = np.where(pos, logp - logq + 1.0, 0.0) * c if p.traced else None
        gq = np.where(qd > KL_EPS, -pd / qc, 0.0) * c if q.traced else None
        return gp, gq

    return _result(value, (p, q), back)


def bce_with_logits(logits: Tensor, labels, positive_weight: float = 1.0) -> Tensor:
    """Mean weighted binary cross-entropy on an n x 1 column of logits."""
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if logits.cols != 1 or y.shape[0] != logits.rows:
        raise ContractError("bce_with_logits expects n x 1 logits and n labels")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("labels must be in {0,1}")
    if not positive_weight > 0:
        raise ContractError("positive_weight must be positive")
    w = float(positive_weight)
    z = logits.data
    n = z.shape[0]
    # softplus(-z) = -log sigmoid(z); softplus(z) = -log(1 - sigmoid(z))
    per = w * y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z)
    value = np.array([[per.sum() / n]])

    def back(g):
        sig = expit(z)
        return ((w * y * (sig - 1.0) + (1.0 - y) * sig) * (g[0, 0] / n),)

    return _result(value, (logits,), back)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw) -> "AdamState":
        return cls(
            [np.zeros_like(p, dtype=np.float64) for p in params],
            [np.zeros_like(p, dtype=np.float64) for p in params],
            **kw,
        )


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update.

    Returns ``(new_params, new_state)``; inputs are not modified.  A ``None``
    gradient is treated as zero.
    """
    if not lr > 0:
        raise ContractError("lr must be positive")
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise ContractError("params, grads and optimizer state differ in length")
    t = state.step + 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        p = np.asarray(p, dtype=np.float64)
        g = np.zeros_like(p) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or m.shape != p.shape:
            raise ContractError(f"shape mismatch in adam_step: {p.shape} vs {g.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, b1, b2, eps)
