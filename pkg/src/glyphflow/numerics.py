"""Dense float32 tensors with a reverse-mode gradient tape.

Everything trainable in this package runs through the primitives here. A
``GradTape`` records primitive operations in execution order, so replaying
the entries backward visits every node exactly once in reverse topological
order. Tensors are treated as immutable values once constructed; a tape is
owned by a single training step and is consumed by ``backward``.

Design constraints honoured throughout:
  * float32 everywhere (the evaluator's matrix square root is the only
    64-bit code in the package, and it lives elsewhere);
  * reverse mode only -- parameter counts dwarf output counts;
  * broadcasting limited to numpy-style leading/size-1 axes, which covers
    batched training without a general broadcasting engine.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32

DEFAULT_NORM_EPS = 1e-5


class ContractError(ValueError):
    """A caller violated an operation's stated preconditions."""


class DimensionError(ContractError):
    """Operand shapes do not line up for the requested operation."""


class NumericError(ArithmeticError):
    """A numeric invariant (finiteness, positive-semidefiniteness) failed."""


_finite_checks = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle post-op finiteness assertions; returns the previous setting.

    The assertions are a runtime guard for the all-entries-finite invariant.
    Hot training loops may disable them and instead check the scalar loss
    each step.
    """
    global _finite_checks
    previous = _finite_checks
    _finite_checks = bool(enabled)
    return previous


class finite_checks_disabled:
    """Context manager that suspends finiteness assertions."""

    def __enter__(self):
        self._prev = set_finite_checks(False)
        return self

    def __exit__(self, *exc):
        set_finite_checks(self._prev)
        return False


class Tensor:
    """A dense float32 array plus the metadata the tape needs.

    ``requires_grad`` marks a leaf parameter. ``frozen`` removes a parameter
    from training without detaching it from forward computation; gradient
    writes to frozen leaves raise.
    """

    __slots__ = ("data", "requires_grad", "frozen", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.frozen = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def trainable(self) -> bool:
        return self.requires_grad and not self.frozen

    def __repr__(self) -> str:
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.shape})"

    # Operator sugar; the functions below do the real work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def param(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of primitive operations for one backward pass."""

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], tuple[bool, ...], Callable]] = []
        self._on_tape: set[int] = set()
        self._leaves: dict[int, Tensor] = {}
        self.consumed = False

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def needs(self, t: Tensor) -> bool:
        return id(t) in self._on_tape or t.trainable()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        """Append one primitive. ``vjp(grad_out, needs)`` must return one
        gradient array (or None) per input."""
        needs = tuple(self.needs(t) for t in inputs)
        for t, needed in zip(inputs, needs):
            if needed and t.trainable() and id(t) not in self._on_tape:
                self._leaves[id(t)] = t
        self.entries.append((out, inputs, needs, vjp))
        self._on_tape.add(id(out))


def backward(loss: Tensor, tape: GradTape) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(parameter) for every trainable leaf on the tape.

    The tape is consumed: a second backward over it raises. Returns a dict
    keyed by the leaf Tensor objects themselves.
    """
    if tape.consumed:
        raise ContractError("tape already consumed by a previous backward()")
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for out, inputs, needs, vjp in reversed(tape.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gt in zip(inputs, vjp(g, needs)):
            if gt is None:
                continue
            if t.frozen:
                raise ContractError(f"gradient write to frozen block {t.name!r}")
            seen = grads.get(id(t))
            grads[id(t)] = gt if seen is None else seen + gt
    return {leaf: grads[i] for i, leaf in tape._leaves.items() if i in grads}


def custom_op(inputs: Sequence[Tensor], value: np.ndarray, vjp: Callable, name: str = "custom") -> Tensor:
    """Register a caller-defined primitive on the active tape.

    ``vjp(grad_out, needs)`` follows the same contract as built-in ops. The
    grad-check harness uses this to inject deliberately wrong gradients.
    """
    out = Tensor(value)
    return _trace(out, tuple(inputs), vjp, name)


def _trace(out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable, opname: str) -> Tensor:
    if _finite_checks and not np.isfinite(out.data).all():
        raise NumericError(f"{opname} produced non-finite values")
    tape = _active_tape()
    if tape is not None and any(tape.needs(t) for t in inputs):
        tape.record(out, inputs, vjp)
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.astype(DTYPE, copy=False)


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def vjp(g, needs):
        return (
            _sum_to_shape(g, a.shape) if needs[0] else None,
            _sum_to_shape(g, b.shape) if needs[1] else None,
        )

    return _trace(out, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def vjp(g, needs):
        return (
            _sum_to_shape(g, a.shape) if needs[0] else None,
            _sum_to_shape(-g, b.shape) if needs[1] else None,
        )

    return _trace(out, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def vjp(g, needs):
        return (
            _sum_to_shape(g * b.data, a.shape) if needs[0] else None,
            _sum_to_shape(g * a.data, b.shape) if needs[1] else None,
        )

    return _trace(out, (a, b), vjp, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    out = Tensor(x.data * DTYPE(c))

    def vjp(g, needs):
        return ((g * DTYPE(c)) if needs[0] else None,)

    return _trace(out, (x,), vjp, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with optional leading batch axes on either operand."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def vjp(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _sum_to_shape(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if needs[1]:
            gb = _sum_to_shape(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _trace(out, (a, b), vjp, "matmul")


def rms_norm(x: Tensor, gain: Tensor, eps: float = DEFAULT_NORM_EPS) -> Tensor:
    """Scale each trailing-axis row to unit RMS, then apply an elementwise gain."""
    x, gain = as_tensor(x), as_tensor(gain)
    if eps <= 0:
        raise ContractError(f"rms_norm eps must be > 0, got {eps}")
    d = x.shape[-1]
    if d < 1 or gain.shape != (d,):
        raise DimensionError(f"rms_norm gain shape {gain.shape} does not match last dim {d}")
    ms = np.mean(np.square(x.data), axis=-1, keepdims=True)
    s = 1.0 / np.sqrt(ms + DTYPE(eps))
    xhat = x.data * s
    out = Tensor(xhat * gain.data)

    def vjp(g, needs):
        gx = ggain = None
        if needs[1]:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0).astype(DTYPE)
        if needs[0]:
            u = g * gain.data
            gx = (s * u - (s ** 3) * x.data * np.mean(u * x.data, axis=-1, keepdims=True)).astype(DTYPE)
        return gx, ggain

    return _trace(out, (x, gain), vjp, "rms_norm")


def softmax(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis (row max subtracted)."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((y * (g - dot)).astype(DTYPE),)

    return _trace(out, (x,), vjp, "softmax")


def silu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # clip keeps float32 exp in range; sigmoid saturates exactly beyond +-60
    z = np.clip(x.data, -60.0, 60.0)
    sig = 1.0 / (1.0 + np.exp(-z))
    out = Tensor(x.data * sig)

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        return ((g * sig * (1.0 + x.data * (1.0 - sig))).astype(DTYPE),)

    return _trace(out, (x,), vjp, "silu")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; the gradient scatter-adds into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError(f"embedding ids must be integers, got dtype {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError("embedding ids out of vocabulary range")
    out = Tensor(table.data[ids])

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _trace(out, (table,), vjp, "embedding")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))

    def vjp(g, needs):
        return (g.reshape(x.shape) if needs[0] else None,)

    return _trace(out, (x,), vjp, "reshape")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.ascontiguousarray(np.transpose(x.data, axes)))
    inverse = tuple(np.argsort(axes))

    def vjp(g, needs):
        return (np.ascontiguousarray(np.transpose(g, inverse)) if needs[0] else None,)

    return _trace(out, (x,), vjp, "transpose")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    """Mean over one axis, or over every element when ``axis`` is None."""
    x = as_tensor(x)
    out = Tensor(np.mean(x.data, axis=axis))

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        if axis is None:
            return (np.full(x.shape, g / x.size, dtype=DTYPE),)
        n = x.shape[axis]
        return ((np.expand_dims(g, axis) / DTYPE(n)) * np.ones(x.shape, dtype=DTYPE),)

    return _trace(out, (x,), vjp, "mean")


def mean_pool(x: Tensor, axis: int) -> Tensor:
    return mean(x, axis=axis)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    edges = np.cumsum([0] + sizes)

    def vjp(g, needs):
        slices = []
        for i, p in enumerate(parts):
            if not needs[i]:
                slices.append(None)
                continue
            index = [slice(None)] * g.ndim
            index[axis] = slice(edges[i], edges[i + 1])
            slices.append(np.ascontiguousarray(g[tuple(index)]))
        return tuple(slices)

    return _trace(out, parts, vjp, "concat")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    out = Tensor(np.ascontiguousarray(x.data[tuple(index)]))

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        gx = np.zeros(x.shape, dtype=DTYPE)
        gx[tuple(index)] = g
        return (gx,)

    return _trace(out, (x,), vjp, "slice_axis")


def tile_axis(x: Tensor, axis: int, reps: int) -> Tensor:
    """Repeat each index along ``axis`` ``reps`` times (grouped-query sharing)."""
    x = as_tensor(x)
    out = Tensor(np.repeat(x.data, reps, axis=axis))

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        shape = list(x.shape)
        shape[axis:axis + 1] = [x.shape[axis], reps]
        return (g.reshape(shape).sum(axis=axis + 1).astype(DTYPE),)

    return _trace(out, (x,), vjp, "tile_axis")


def rope_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive dim pairs of ``x`` by precomputed angles.

    ``cos``/``sin`` have shape (..., L, d/2) and broadcast against the
    leading axes of ``x``. The backward pass is the inverse rotation.
    """
    x = as_tensor(x)
    if x.shape[-1] % 2:
        raise DimensionError(f"rope_rotate needs an even last dim, got {x.shape}")
    cos = cos.astype(DTYPE, copy=False)
    sin = sin.astype(DTYPE, copy=False)
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    out_data = np.empty_like(x.data)
    out_data[..., 0::2] = xe * cos - xo * sin
    out_data[..., 1::2] = xe * sin + xo * cos
    out = Tensor(out_data)

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return _trace(out, (x,), vjp, "rope_rotate")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``.

    ``logits`` has shape (..., K); ``labels`` the matching leading shape.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"labels shape {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError("labels out of class range")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    flat_labels = labels.reshape(-1)
    n = max(flat_labels.size, 1)
    picked = logp.reshape(-1, k)[np.arange(flat_labels.size), flat_labels]
    out = Tensor(-picked.mean() if flat_labels.size else 0.0)

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        probs = np.exp(logp)
        gl = probs.reshape(-1, k).copy()
        gl[np.arange(flat_labels.size), flat_labels] -= 1.0
        return ((gl * (g / n)).reshape(logits.shape).astype(DTYPE),)

    return _trace(out, (logits,), vjp, "cross_entropy")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam over named parameters; frozen blocks never receive moments."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = {n: p for n, p in params.items() if p.trainable()}
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        for t in grads:
            if t.frozen:
                raise ContractError(f"optimizer received a gradient for frozen block {t.name!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for n, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            m = self.m[n]
            v = self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(DTYPE)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class BlockCheck:
    name: str
    max_err: float
    n_checked: int
    passed: bool


@dataclass
class GradCheckReport:
    blocks: dict[str, BlockCheck]
    tol: float

    @property
    def passed(self) -> bool:
        return all(b.passed for b in self.blocks.values())

    def failing(self) -> list[str]:
        return [name for name, b in self.blocks.items() if not b.passed]

    def __str__(self) -> str:
        lines = [f"grad_check tol={self.tol}"]
        for name, b in self.blocks.items():
            mark = "ok  " if b.passed else "FAIL"
            lines.append(f"  {mark} {name}: max_err={b.max_err:.3e} over {b.n_checked} coords")
        return "\n".join(lines)


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor],
               step: float = 1e-3, tol: float = 1e-3,
               n_coords: int = 32, rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare tape gradients of ``f()`` against central finite differences.

    ``f`` must rebuild its computation from ``params`` on every call and
    return a scalar. For each block a random subsample of at least 32
    coordinates (or the whole block if smaller) is perturbed by +-``step``.
    The error measure is |analytic - numeric| / max(1, |analytic| + |numeric|),
    so it is relative for large gradients and absolute for small ones.
    Failures are reported, never raised.
    """
    if step <= 0:
        raise ContractError(f"grad_check step must be > 0, got {step}")
    rng = rng or np.random.default_rng(0)
    n_coords = max(n_coords, 32)

    with GradTape() as tape:
        loss = f()
    grads = backward(loss, tape)

    blocks: dict[str, BlockCheck] = {}
    for name, p in params.items():
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = min(flat.size, n_coords)
        coords = rng.choice(flat.size, size=n, replace=False) if flat.size > n else np.arange(flat.size)
        max_err = 0.0
        for i in coords:
            original = flat[i]
            flat[i] = original + step
            up = f().item()
            flat[i] = original - step
            down = f().item()
            flat[i] = original
            numeric = (up - down) / (2.0 * step)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(1.0, abs(a) + abs(numeric))
            max_err = max(max_err, err)
        blocks[name] = BlockCheck(name, max_err, int(n), max_err <= tol)
    return GradCheckReport(blocks, tol)
