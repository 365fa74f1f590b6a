"""Reverse-mode automatic differentiation on float64 numpy arrays.

Exactly the operations the association model needs: affine maps, ReLU/tanh,
layer normalization, row softmax and log-softmax, row gathers and
concatenation, a relative-offset score kernel, reductions, and selected
negative log-likelihood, plus SGD with momentum and an npz checkpoint
format.

The graph is implicit: an op whose inputs require gradients records
(op name, parents, backward closure) on its output tensor. `backward` walks
the recorded subgraph once in reverse topological order and accumulates
gradients into every tensor that requires them. Ops on plain tensors (or
inside `no_grad`) skip recording, so inference costs only the numpy calls.
"""

from __future__ import annotations

import json
import os
import tempfile
import zipfile
from typing import Callable, Iterable

import numpy as np

CHECKPOINT_FORMAT = "softtrack-checkpoint"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Operand shapes incompatible with an operation."""


class MissingGradientError(RuntimeError):
    """An optimizer step found a parameter with no gradient."""


class CheckpointError(ValueError):
    """Unreadable or version-incompatible checkpoint file."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference fast path)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A float64 array plus an optional gradient and graph node record."""

    __slots__ = ("data", "grad", "requires_grad", "_op", "_parents", "_back")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._back: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.data.shape}{flag}{op})"


def tensor(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _make(op: str, data, parents: tuple[Tensor, ...], back: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._op = op
        out._parents = parents
        out._back = back
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: mismatched shapes {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise and affine ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    da, db = a.data, b.data
    return _make("mul", da * db, (a, b), lambda g: (g * db, g * da))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    da, db = a.data, b.data
    return _make("div", da / db, (a, b), lambda g: (g / db, -g * da / (db * db)))


def add_const(a: Tensor, c: float) -> Tensor:
    return _make("add_const", a.data + float(c), (a,), lambda g: (g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def add_row(a: Tensor, b: Tensor) -> Tensor:
    """Add a length-m vector to every row of an (n, m) matrix."""
    if a.data.ndim != 2 or b.data.ndim != 1 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"add_row: matrix {a.data.shape} vs row {b.data.shape}")
    return _make("add_row", a.data + b.data[None, :], (a, b),
                 lambda g: (g, g.sum(axis=0)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise ValueError("sqrt: negative input")
    y = np.sqrt(a.data)
    return _make("sqrt", y, (a,), lambda g: (g * 0.5 / y,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    da, db = a.data, b.data
    return _make("matmul", da @ db, (a, b), lambda g: (g @ db.T, da.T @ g))


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError(f"dot: incompatible shapes {a.data.shape} . {b.data.shape}")
    da, db = a.data, b.data
    return _make("dot", da @ db, (a, b), lambda g: (g * db, g * da))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.data.shape}")
    return _make("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# normalization and softmax


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0.0:
        raise ValueError("layer_norm: eps must be positive")
    m = x.data.shape[-1]
    if gain.data.shape != (m,) or bias.data.shape != (m,):
        raise ShapeError(
            f"layer_norm: gain {gain.data.shape} / bias {bias.data.shape} "
            f"for input {x.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gx = g * gain.data
        gmean = gx.mean(axis=-1, keepdims=True)
        gdot = (gx * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (gx - gmean - xhat * gdot)
        if g.ndim > 1:
            axes = tuple(range(g.ndim - 1))
            dgain = (g * xhat).sum(axis=axes)
            dbias = g.sum(axis=axes)
        else:
            dgain = g * xhat
            dbias = g.copy()
        return dx, dgain, dbias

    return _make("layer_norm", out, (x, gain, bias), back)


def softmax(a: Tensor) -> Tensor:
    """Row softmax over the last axis, max-shifted for stability."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dotted = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dotted),)

    return _make("softmax", y, (a,), back)


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def back(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (a,), back)


# ---------------------------------------------------------------------------
# structural ops


def concat_rows(*parts: Tensor) -> Tensor:
    """Stack inputs as rows; 1-D inputs become single rows."""
    if not parts:
        raise ShapeError("concat_rows: no inputs")
    mats, counts = [], []
    width = None
    for p in parts:
        m = p.data if p.data.ndim == 2 else p.data.reshape(1, -1)
        if width is None:
            width = m.shape[1]
        elif m.shape[1] != width:
            raise ShapeError(f"concat_rows: row widths {m.shape[1]} vs {width}")
        mats.append(m)
        counts.append(m.shape[0])
    out = np.concatenate(mats, axis=0)

    def back(g):
        grads = []
        at = 0
        for p, n in zip(parts, counts):
            piece = g[at:at + n]
            grads.append(piece if p.data.ndim == 2 else piece[0])
            at += n
        return tuple(grads)

    return _make("concat_rows", out, tuple(parts), back)


def gather_rows(a: Tensor, index) -> Tensor:
    """Select rows of an (n, m) matrix; duplicate indices sum in the backward pass."""
    idx = np.asarray(index, dtype=np.intp)
    if a.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"gather_rows: matrix {a.data.shape}, index shape {idx.shape}")
    n = a.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range for {n} rows")

    def back(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        return (da,)

    return _make("gather_rows", a.data[idx], (a,), back)


def offset_scores(q: Tensor, table: Tensor, index) -> Tensor:
    """Pairwise scores s[i, j] = q[i] . table[index[i, j]].

    `index` is a constant integer matrix choosing one table row per (i, j);
    gradients flow to q and to the selected table rows only.
    """
    idx = np.asarray(index, dtype=np.intp)
    if (q.data.ndim != 2 or table.data.ndim != 2
            or q.data.shape[1] != table.data.shape[1]
            or idx.ndim != 2 or idx.shape[0] != q.data.shape[0]):
        raise ShapeError(
            f"offset_scores: q {q.data.shape}, table {table.data.shape}, "
            f"index {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(
            f"offset_scores: index out of range for table of {table.data.shape[0]} rows")
    rows = table.data[idx]                       # (n, m, d)
    out = np.einsum("nd,nmd->nm", q.data, rows)

    def back(g):
        dq = np.einsum("nm,nmd->nd", g, rows)
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, g[:, :, None] * q.data[:, None, :])
        return dq, dt

    return _make("offset_scores", out, (q, table), back)


# ---------------------------------------------------------------------------
# reductions and selection


def sum_all(a: Tensor) -> Tensor:
    return _make("sum_all", np.asarray(a.data.sum()), (a,),
                 lambda g: (g * np.ones_like(a.data),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _make("mean_all", np.asarray(a.data.mean()), (a,),
                 lambda g: (g * np.ones_like(a.data) / n,))


def sum_rows(a: Tensor) -> Tensor:
    """Row sums of an (n, m) matrix, kept as an (n, 1) column."""
    if a.data.ndim != 2:
        raise ShapeError(f"sum_rows: expected a matrix, got shape {a.data.shape}")
    return _make("sum_rows", a.data.sum(axis=1, keepdims=True), (a,),
                 lambda g: (g * np.ones_like(a.data),))


def pick(a: Tensor, row: int, col: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"pick: expected a matrix, got shape {a.data.shape}")

    def back(g):
        da = np.zeros_like(a.data)
        da[row, col] = g
        return (da,)

    return _make("pick", np.asarray(a.data[row, col]), (a,), back)


def nll_rows(log_probs: Tensor, targets) -> Tensor:
    """Sum of negative selected log-probabilities, one target column per row."""
    t = np.asarray(targets, dtype=np.intp)
    if log_probs.data.ndim != 2 or t.ndim != 1 or t.shape[0] != log_probs.data.shape[0]:
        raise ShapeError(
            f"nll_rows: log_probs {log_probs.data.shape}, targets shape {t.shape}")
    k = log_probs.data.shape[1]
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ValueError(f"nll_rows: target index out of range for {k} classes")
    rows = np.arange(t.shape[0])
    out = np.asarray(-log_probs.data[rows, t].sum())

    def back(g):
        d = np.zeros_like(log_probs.data)
        d[rows, t] = -g
        return (d,)

    return _make("nll_rows", out, (log_probs,), back)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor, params: Iterable[Tensor] | dict | None = None) -> None:
    """Accumulate d loss / d tensor into `.grad` of every reachable tensor.

    Tensors in `params` that the loss does not reach get explicit zero
    gradients, so an optimizer step over a fixed parameter set stays uniform
    even when some parameters sit outside the recorded graph.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.data.shape}")

    # Iterative post-order over op nodes; nodes are marked visited when
    # appended, and may be pushed more than once, which keeps the order a
    # valid topological sort for DAGs with shared subexpressions.
    order: list[Tensor] = []
    visited: set[int] = set()
    if loss._back is not None:
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                if id(node) not in visited:
                    visited.add(id(node))
                    order.append(node)
                continue
            if id(node) in visited:
                continue
            stack.append((node, True))
            for p in node._parents:
                if p._back is not None and id(p) not in visited:
                    stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for p, pg in zip(node._parents, node._back(g)):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            p.grad = pg.copy() if p.grad is None else p.grad + pg

    if params is not None:
        values = params.values() if isinstance(params, dict) else params
        for p in values:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# optimizer


class SgdOptimizer:
    """SGD with classical momentum: v <- m v + g; p <- p - lr v."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 momentum: float = 0.9):
        self.params = dict(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self) -> None:
        """Apply one update from current gradients, then clear them."""
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradientError(f"sgd step: parameter '{name}' has no gradient")
        for name, p in self.params.items():
            v = self.momentum * self.velocity[name] + p.grad
            self.velocity[name] = v
            p.data = p.data - self.lr * v
            p.grad = None

    def load_velocity(self, velocity: dict[str, np.ndarray]) -> None:
        for name in self.params:
            if name in velocity:
                self.velocity[name] = np.asarray(velocity[name], dtype=np.float64).copy()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, params: dict[str, Tensor], hyper: dict,
                    extras: dict[str, np.ndarray] | None = None) -> None:
    """Write parameters (and optional extra arrays) with a JSON metadata block.

    npz layout: key "p:<name>" per parameter, "x:<name>" per extra array,
    and "meta" holding {"format", "version", "hyper"} as a JSON string.
    float64 arrays are stored raw, so save -> load is bit-exact.
    """
    arrays: dict[str, np.ndarray] = {}
    for name, p in params.items():
        arrays["p:" + name] = p.data
    for name, arr in (extras or {}).items():
        arrays["x:" + name] = np.asarray(arr, dtype=np.float64)
    meta = json.dumps({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                       "hyper": hyper})
    arrays["meta"] = np.array(meta)

    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".npz")
    os.close(fd)
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> tuple[dict[str, Tensor], dict, dict[str, np.ndarray]]:
    """Read a checkpoint; returns (params, hyper, extras)."""
    try:
        with np.load(path, allow_pickle=False) as npz:
            if "meta" not in npz:
                raise CheckpointError(f"{path}: not a checkpoint (no metadata block)")
            meta = json.loads(str(npz["meta"]))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path}: unrecognized format {meta.get('format')!r}")
            if meta.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(
                    f"{path}: checkpoint version {meta.get('version')} "
                    f"(supported: {CHECKPOINT_VERSION})")
            params: dict[str, Tensor] = {}
            extras: dict[str, np.ndarray] = {}
            for key in npz.files:
                if key.startswith("p:"):
                    params[key[2:]] = parameter(npz[key])
                elif key.startswith("x:"):
                    extras[key[2:]] = np.asarray(npz[key], dtype=np.float64)
            return params, meta["hyper"], extras
    except CheckpointError:
        raise
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        # np.load reports non-archive bytes as a plain ValueError
        raise CheckpointError(f"{path}: unreadable checkpoint: {exc}") from exc
