"""Dense float64 tensors with a recording tape and reverse-mode gradients.

Every differentiable primitive is a forward function ``fwd(*arrays, **attrs)``
returning ``(output_array, vjp)``, where ``vjp(g)`` maps the output cotangent
to one cotangent per input. Primitives live in :data:`PRIMITIVES` and are
looked up at call time, so a tape can re-execute them (``Tape.replay``) and
tests can swap one out for fault injection.

Ops only record while a :class:`Tape` is active::

    with Tape() as tape:
        loss = mse(x @ w, target)
    backward(loss, tape)
"""

from __future__ import annotations

import contextvars
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .errors import DimensionError, NonFiniteError, OracleError, ParameterError, UsageError

__all__ = [
    "Tensor",
    "Tape",
    "TapeEntry",
    "PRIMITIVES",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "tsum",
    "mean",
    "softmax",
    "layer_norm",
    "silu",
    "index",
    "scatter_rows",
    "concat",
    "mse",
    "cross_entropy",
    "top_k",
    "top_k_rows",
    "backward",
    "grad_check",
    "dumps",
    "loads",
    "save_tensor",
    "load_tensor",
]

_ids = itertools.count()
_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("active_tape", default=None)


class Tensor:
    """A dense array of 64-bit reals with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "id", "name")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, name)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool, op: str) -> "Tensor":
        # no copy: op outputs are freshly allocated
        _check_finite(arr, op)
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.id = next(_ids)
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, what: str | None) -> None:
    if arr.size and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {what or 'constructor'}")


# ---------------------------------------------------------------- tape


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    attrs: dict
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Entries are appended in execution order, so the record is topologically
    sorted by construction.
    """

    entries: list[TapeEntry] = field(default_factory=list)
    _token: Any = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def is_topologically_ordered(self) -> bool:
        produced: set[int] = set()
        outputs = {e.output.id for e in self.entries}
        for e in self.entries:
            for t in e.inputs:
                if t.id in outputs and t.id not in produced:
                    return False
            produced.add(e.output.id)
        return True

    def replay(self) -> list[np.ndarray]:
        """Re-execute every entry from the leaf values; return fresh outputs."""
        values: dict[int, np.ndarray] = {}
        outs = []
        for e in self.entries:
            arrays = [values.get(t.id, t.data) for t in e.inputs]
            out, _ = PRIMITIVES[e.op](*arrays, **e.attrs)
            values[e.output.id] = out
            outs.append(out)
        return outs

    def replay_matches(self) -> bool:
        fresh = self.replay()
        return all(np.array_equal(a, e.output.data) for a, e in zip(fresh, self.entries))


def active_tape() -> Tape | None:
    return _active_tape.get()


def apply(op: str, *inputs: Tensor, **attrs) -> Tensor:
    # overflow is reported by the finiteness check on the result, not as a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        out, vjp = PRIMITIVES[op](*(t.data for t in inputs), **attrs)
    needs_grad = any(t.requires_grad for t in inputs)
    result = Tensor._wrap(np.asarray(out, dtype=np.float64), needs_grad, op)
    tape = _active_tape.get()
    if tape is not None:
        tape.record(TapeEntry(op, inputs, result, attrs, vjp))
    return result


# ---------------------------------------------------------------- primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _add(a, b):
    _broadcast_shape("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _sub(a, b):
    _broadcast_shape("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _mul(a, b):
    _broadcast_shape("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _div(a, b):
    _broadcast_shape("div", a, b)
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


def _scale(a, c):
    return a * c, lambda g: (g * c,)


def _matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b, lambda g: (g @ b.T, a.T @ g)


def _transpose(a):
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return a.T.copy(), lambda g: (g.T,)


def _reshape(a, shape):
    try:
        out = a.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view shape {a.shape} as {shape}") from None
    return out.copy(), lambda g: (g.reshape(a.shape),)


def _sum(a, axis=None, keepdims=False):
    out = np.sum(a, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return np.asarray(out), vjp


def _softmax(x, axis=-1):
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return p, vjp


def _layer_norm(x, gain, bias, eps=1e-5):
    if eps <= 0:
        raise ParameterError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {d}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def vjp(g):
        gx_hat = g * gain
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return xhat * gain + bias, vjp


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _silu(x):
    s = _sigmoid(x)
    return x * s, lambda g: (g * (s * (1.0 + x * (1.0 - s))),)


def _index(x, key):
    out = x[key]

    def vjp(g):
        gx = np.zeros_like(x)
        np.add.at(gx, key, g)
        return (gx,)

    return np.array(out, dtype=np.float64), vjp


def _scatter_rows(src, rows, n_rows):
    if src.ndim != 2 or len(rows) != src.shape[0]:
        raise DimensionError(f"scatter_rows: {len(rows)} row ids for source shape {src.shape}")
    out = np.zeros((n_rows, src.shape[1]))
    np.add.at(out, rows, src)
    return out, lambda g: (g[rows],)


def _concat(*xs, axis=0):
    try:
        out = np.concatenate(xs, axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return out, lambda g: tuple(np.split(g, cuts, axis=axis))


def _mse(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return np.asarray(np.sum(d * d)), lambda g: (2.0 * g * d, -2.0 * g * d)


def _cross_entropy(logits, targets):
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects T x V logits, got {logits.shape}")
    n, v = logits.shape
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != (n,):
        raise DimensionError(f"cross_entropy: {tgt.shape[0] if tgt.ndim else 0} targets for {n} positions")
    if n == 0:
        raise ParameterError("cross_entropy needs at least one position")
    if tgt.min() < 0 or tgt.max() >= v:
        raise ParameterError(f"cross_entropy: target ids must lie in [0, {v})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    loss = -logp[rows, tgt].mean()

    def vjp(g):
        p = np.exp(logp)
        p[rows, tgt] -= 1.0
        return (g * p / n,)

    return np.asarray(loss), vjp


PRIMITIVES: dict[str, Callable] = {
    "add": _add,
    "sub": _sub,
    "mul": _mul,
    "div": _div,
    "scale": _scale,
    "matmul": _matmul,
    "transpose": _transpose,
    "reshape": _reshape,
    "sum": _sum,
    "softmax": _softmax,
    "layer_norm": _layer_norm,
    "silu": _silu,
    "index": _index,
    "scatter_rows": _scatter_rows,
    "concat": _concat,
    "mse": _mse,
    "cross_entropy": _cross_entropy,
}


# ---------------------------------------------------------------- public ops


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply("mul", a, b)


def div(a: Tensor, b: Tensor) -> Tensor:
    return apply("div", a, b)


def scale(a: Tensor, c: float) -> Tensor:
    return apply("scale", a, c=float(c))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply("matmul", a, b)


def transpose(a: Tensor) -> Tensor:
    return apply("transpose", a)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return apply("reshape", a, shape=tuple(shape))


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return apply("sum", a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ParameterError("mean over an empty axis")
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return apply("softmax", x, axis=axis)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    return apply("layer_norm", x, gain, bias, eps=eps)


def silu(x: Tensor) -> Tensor:
    return apply("silu", x)


def index(x: Tensor, key) -> Tensor:
    """Differentiable ``x[key]`` for basic and integer-array keys."""
    return apply("index", x, key=key)


def scatter_rows(src: Tensor, rows: Sequence[int], n_rows: int) -> Tensor:
    """Place row r of ``src`` at row ``rows[r]`` of an ``n_rows``-row zero matrix (summing duplicates)."""
    return apply("scatter_rows", src, rows=np.asarray(rows, dtype=np.int64), n_rows=int(n_rows))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply("concat", *xs, axis=axis)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared differences, ``||a - b||^2`` (not averaged)."""
    return apply("mse", a, b)


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax."""
    return apply("cross_entropy", logits, targets=tuple(int(t) for t in targets))


def top_k(x: Tensor | np.ndarray, k: int) -> tuple[list[int], list[float]]:
    """Indices and values of the ``k`` largest entries, descending; ties go to the lower index."""
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64).reshape(-1)
    if not 1 <= k <= arr.size:
        raise ParameterError(f"top_k: k={k} outside [1, {arr.size}]")
    order = np.argsort(-arr, kind="stable")[:k]
    return [int(i) for i in order], [float(arr[i]) for i in order]


def top_k_rows(arr: np.ndarray, k: int) -> np.ndarray:
    """Row-wise :func:`top_k` indices for a 2-D array."""
    if not 1 <= k <= arr.shape[1]:
        raise ParameterError(f"top_k: k={k} outside [1, {arr.shape[1]}]")
    return np.argsort(-arr, axis=1, kind="stable")[:, :k]


# ---------------------------------------------------------------- gradients


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {e.output.id for e in tape.entries}
    if loss.id not in produced and not loss.requires_grad:
        raise UsageError("loss was not produced through the given tape")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.id not in produced:
        leaves[loss.id] = loss
    for entry in reversed(tape.entries):
        g = grads.pop(entry.output.id, None)
        if g is None:
            continue
        for t, gi in zip(entry.inputs, entry.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.id not in produced:
                leaves[t.id] = t
            if t.id in grads:
                grads[t.id] = grads[t.id] + gi
            else:
                grads[t.id] = gi
    for tid, t in leaves.items():
        g = grads.get(tid)
        if g is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` takes no arguments and reads ``params`` by closure. The error for
    one coordinate is ``|analytic - numeric| / max(1, |numeric|)``. With
    ``max_coords`` only that many coordinates per parameter are probed,
    chosen by ``seed``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ParameterError(f"grad_check eps={eps} outside [1e-7, 1e-3]")

    def value() -> float:
        return f().item()

    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p, g in zip(params, saved):
        p.grad = g

    if value() != value():
        raise OracleError("grad_check: function is not deterministic")

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        ga = a.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = value()
            flat[c] = orig - eps
            fm = value()
            flat[c] = orig
            num = (fp - fm) / (2.0 * eps)
            worst = max(worst, abs(ga[c] - num) / max(1.0, abs(num)))
    return worst


# ---------------------------------------------------------------- text format


def dumps(t: Tensor | np.ndarray) -> str:
    """Shape line, then one line per innermost row, 17 significant digits."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    lines = [" ".join(str(n) for n in arr.shape)]
    rows = arr.reshape(-1, arr.shape[-1]) if arr.ndim >= 1 and arr.shape[-1] > 0 else arr.reshape(1, -1)
    for row in rows:
        if row.size:
            lines.append(" ".join(format(float(v), ".17g") for v in row))
    return "\n".join(lines) + "\n"


def loads(text: str) -> Tensor:
    lines = text.splitlines()
    if not lines:
        raise ParameterError("empty tensor document")
    shape = tuple(int(s) for s in lines[0].split())
    values = [float(v) for line in lines[1:] for v in line.split()]
    if math.prod(shape) != len(values):
        raise DimensionError(f"tensor document declares shape {shape} but holds {len(values)} values")
    return Tensor(np.array(values, dtype=np.float64).reshape(shape))


def save_tensor(t: Tensor | np.ndarray, path: str | Path) -> None:
    Path(path).write_text(dumps(t))


def load_tensor(path: str | Path) -> Tensor:
    return loads(Path(path).read_text())
