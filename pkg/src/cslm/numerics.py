"""Small reverse-mode differentiation kernel over float64 numpy arrays.

Every operation returns a :class:`Tensor`.  When at least one input needs a
gradient, the result records its parents and a closure that pushes the
output gradient back to them; :func:`backward` replays those closures in
reverse topological order.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class NumericalError(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named leaf tensor whose gradient is always allocated."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _result(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1:
        raise ValueError("backward() needs a scalar loss")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if not isinstance(node, Parameter):
                # interior gradients are no longer needed
                node.grad = None
                node._parents = ()
                node._backward = None


# --------------------------------------------------------------------------
# operations


def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = x W^T + b`` for ``W`` of shape (m, n) and ``x`` of shape (n,) or (B, n)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.data.shape[-1] != W.data.shape[1]:
        raise ValueError(f"affine: x has {x.data.shape[-1]} columns, W expects {W.data.shape[1]}")
    y = x.data @ W.data.T
    parents = [x, W]
    if b is not None:
        b = as_tensor(b)
        if b.data.shape != (W.data.shape[0],):
            raise ValueError(f"affine: bias shape {b.data.shape} != ({W.data.shape[0]},)")
        y = y + b.data
        parents.append(b)

    def _bw(g):
        if x.requires_grad:
            x._accumulate(g @ W.data)
        if W.requires_grad:
            if g.ndim == 1:
                W._accumulate(np.outer(g, x.data))
            else:
                W._accumulate(g.T @ x.data)
        if b is not None and b.requires_grad:
            b._accumulate(g if g.ndim == 1 else g.sum(axis=0))

    return _result(y, parents, _bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, [a, b], _bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul: shape mismatch {a.data.shape} vs {b.data.shape}")

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(a.data * b.data, [a, b], _bw)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * c, [a], lambda g: a._accumulate(g * c))


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    a = as_tensor(a)
    return _result(a.data.sum(), [a], lambda g: a._accumulate(np.broadcast_to(g, a.data.shape)))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)
    return _result(s, [x], lambda g: x._accumulate(g * s * (1.0 - s)))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _result(t, [x], lambda g: x._accumulate(g * (1.0 - t * t)))


def lstm_memory(z: Tensor, c: Tensor) -> Tensor:
    """New memory ``sig(f)*c + sig(i)*tanh(g)`` from pre-activations laid out [i|f|o|g]."""
    z, c = as_tensor(z), as_tensor(c)
    H = c.data.shape[-1]
    if z.data.shape[-1] != 4 * H:
        raise ValueError(f"lstm_memory: pre-activations need width {4 * H}")
    i = _stable_sigmoid(z.data[..., :H])
    f = _stable_sigmoid(z.data[..., H : 2 * H])
    g = np.tanh(z.data[..., 3 * H :])

    def _bw(gc):
        if z.requires_grad:
            dz = np.zeros_like(z.data)
            dz[..., :H] = gc * g * i * (1.0 - i)
            dz[..., H : 2 * H] = gc * c.data * f * (1.0 - f)
            dz[..., 3 * H :] = gc * i * (1.0 - g * g)
            z._accumulate(dz)
        if c.requires_grad:
            c._accumulate(gc * f)

    return _result(f * c.data + i * g, [z, c], _bw)


def lstm_output(z: Tensor, c_new: Tensor) -> Tensor:
    """Hidden output ``sig(o)*tanh(c_new)``."""
    z, c_new = as_tensor(z), as_tensor(c_new)
    H = c_new.data.shape[-1]
    o = _stable_sigmoid(z.data[..., 2 * H : 3 * H])
    tc = np.tanh(c_new.data)

    def _bw(gh):
        if z.requires_grad:
            dz = np.zeros_like(z.data)
            dz[..., 2 * H : 3 * H] = gh * tc * o * (1.0 - o)
            z._accumulate(dz)
        if c_new.requires_grad:
            c_new._accumulate(gh * o * (1.0 - tc * tc))

    return _result(o * tc, [z, c_new], _bw)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if len(xs) == 1:
        return xs[0]
    data = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.data.shape[axis] for x in xs])

    def _bw(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                x._accumulate(np.take(g, np.arange(lo, hi), axis=axis))

    return _result(data, xs, _bw)


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``x[..., start:stop]``."""
    x = as_tensor(x)

    def _bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        x._accumulate(full)

    return _result(x.data[..., start:stop], [x], _bw)


def embed(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]`` with scatter-add backward."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.intp)

    def _bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        table._accumulate(full)

    return _result(table.data[idx], [table], _bw)


def take(x: Tensor, rows) -> Tensor:
    """Select batch rows ``x[rows]``; rows must be distinct."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.intp)
    if rows.size == x.data.shape[0] and np.array_equal(rows, np.arange(rows.size)):
        return x

    def _bw(g):
        full = np.zeros_like(x.data)
        full[rows] = g
        x._accumulate(full)

    return _result(x.data[rows], [x], _bw)


def merge(parts: Sequence[tuple[np.ndarray, Tensor]], n_rows: int) -> Tensor:
    """Inverse of :func:`take`: scatter disjoint row blocks into one batch."""
    parts = [(np.asarray(r, dtype=np.intp), as_tensor(t)) for r, t in parts]
    if len(parts) == 1 and len(parts[0][0]) == n_rows and np.array_equal(parts[0][0], np.arange(n_rows)):
        return parts[0][1]
    width = parts[0][1].data.shape[1:]
    data = np.zeros((n_rows,) + width, dtype=DTYPE)
    for rows, t in parts:
        data[rows] = t.data

    def _bw(g):
        for rows, t in parts:
            if t.requires_grad:
                t._accumulate(g[rows])

    return _result(data, [t for _, t in parts], _bw)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a raw array (no graph)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_softmax_nll(logits: Tensor, target, weights=None) -> Tensor:
    """Weighted negative log-likelihood ``sum_i w_i * -log softmax(logits_i)[target_i]``.

    Accepts a single logit vector with an integer target, or a (B, V) batch
    with a length-B target array.  Gradient w.r.t. the logits is
    ``w * (softmax - onehot)``.
    """
    logits = as_tensor(logits)
    single = logits.data.ndim == 1
    z = logits.data[None, :] if single else logits.data
    tgt = np.atleast_1d(np.asarray(target, dtype=np.intp))
    V = z.shape[1]
    if tgt.shape[0] != z.shape[0]:
        raise ValueError("log_softmax_nll: one target per row required")
    if np.any(tgt < 0) or np.any(tgt >= V):
        raise IndexError(f"log_softmax_nll: target out of range [0, {V})")
    w = np.ones(z.shape[0]) if weights is None else np.asarray(weights, dtype=DTYPE)
    logp = log_softmax(z)
    rows = np.arange(z.shape[0])
    nll = -logp[rows, tgt]
    loss = float(np.dot(w, nll))

    def _bw(g):
        p = np.exp(logp)
        p[rows, tgt] -= 1.0
        p *= (w * g)[:, None]
        logits._accumulate(p[0] if single else p)

    return _result(loss, [logits], _bw)


def sigmoid_bce(logits: Tensor, labels, weights=None) -> Tensor:
    """Weighted binary cross-entropy of sigmoid(logits) against 0/1 labels."""
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=DTYPE)
    z = logits.data
    w = np.ones_like(z) if weights is None else np.asarray(weights, dtype=DTYPE)
    # softplus(z) - y*z, stable for large |z|
    per = np.logaddexp(0.0, z) - y * z
    s = _stable_sigmoid(z)
    return _result(float(np.sum(w * per)), [logits], lambda g: logits._accumulate(g * w * (s - y)))


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    n_checked: dict[str, int] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def ok(self) -> bool:
        return all(e < self.tolerance for e in self.max_rel_error.values())

    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.max_rel_error.items() if not v < self.tolerance}


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Parameter],
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare backprop gradients against central differences.

    ``max_coords`` subsamples coordinates of large parameters; ``None``
    checks every coordinate.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    analytic = {p.name: p.grad.copy() for p in params}
    rng = rng if rng is not None else make_rng(0)
    report = GradCheckReport(tolerance=tolerance)
    with no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            a_flat = analytic[p.name].reshape(-1)
            worst = 0.0
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                num = (up - down) / (2.0 * eps)
                a = a_flat[i]
                rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
                worst = max(worst, rel)
            report.max_rel_error[p.name] = worst
            report.n_checked[p.name] = int(coords.size)
    for p in params:
        p.zero_grad()
    return report


# --------------------------------------------------------------------------
# randomness


def make_rng(seed) -> np.random.Generator:
    """PCG64 generator; ``seed`` may be an int or a tuple of ints."""
    return np.random.Generator(np.random.PCG64(seed))


def sample_categorical(probs, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from a normalised probability vector."""
    p = np.asarray(probs, dtype=DTYPE)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("sample_categorical: need a non-empty vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("sample_categorical: probabilities must be >= 0 and sum to 1")
    return int(sample_rows(p[None, :], rng)[0])


def sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One inverse-CDF draw per row of a (B, V) array of non-negative weights."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=1)
    overflow = idx >= probs.shape[1]
    if np.any(overflow):
        # u rounded up to the total mass: take the last index with mass
        last = probs.shape[1] - 1 - np.argmax(probs[:, ::-1] > 0, axis=1)
        idx[overflow] = last[overflow]
    return idx


# --------------------------------------------------------------------------
# checkpoints

_MAGIC = "CSLM-PARAMS 1"


def save_params(path, params: dict[str, np.ndarray], header: dict[str, str] | None = None) -> None:
    """Write a text header, a (name, shape) index and raw little-endian float64 data."""
    lines = [_MAGIC]
    for k, v in (header or {}).items():
        if "\n" in str(v) or "\t" in k:
            raise ValueError(f"header entry {k!r} is not single-line")
        lines.append(f"meta\t{k}\t{v}")
    for name, arr in params.items():
        shape = ",".join(str(d) for d in np.shape(arr))
        lines.append(f"tensor\t{name}\t{shape}")
    lines.append("end")
    blob = "\n".join(lines).encode("utf-8") + b"\n"
    with open(path, "wb") as fh:
        fh.write(blob)
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    raw = Path(path).read_bytes()
    end = raw.find(b"\nend\n")
    if not raw.startswith(_MAGIC.encode()) or end < 0:
        raise ValueError(f"{path}: not a parameter checkpoint")
    header: dict[str, str] = {}
    index: list[tuple[str, tuple[int, ...]]] = []
    for line in raw[:end].decode("utf-8").split("\n")[1:]:
        kind, name, rest = line.split("\t", 2)
        if kind == "meta":
            header[name] = rest
        else:
            index.append((name, tuple(int(d) for d in rest.split(",") if d)))
    offset = end + len(b"\nend\n")
    params = {}
    for name, shape in index:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = 8 * n
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise ValueError(f"{path}: truncated tensor {name}")
        params[name] = np.frombuffer(chunk, dtype="<f8").astype(DTYPE).reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after last tensor")
    return params, header


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(a, a)) for a in arrays))


__all__ = [
    "DTYPE", "NumericalError", "Tensor", "Parameter", "no_grad", "backward",
    "affine", "add", "mul", "scale", "total", "sigmoid", "tanh",
    "lstm_memory", "lstm_output", "concat",
    "columns", "embed", "take", "merge", "softmax", "log_softmax",
    "log_softmax_nll", "sigmoid_bce", "grad_check", "GradCheckReport",
    "make_rng", "sample_categorical", "sample_rows", "save_params",
    "load_params", "global_norm",
]
