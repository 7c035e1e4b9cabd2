"""Minimal reverse-mode autodiff over float64 numpy arrays.

A :class:`Tape` records every differentiable op executed against it. Calling
``tape.backward(loss)`` walks the record in reverse and accumulates gradients
into the :class:`Var` nodes and, finally, into the :class:`Parameter` objects
that were bound with ``tape.param``.

All ops accept an optional leading batch axis where that is natural (``affine``
on ``(B, n)`` inputs, elementwise ops with numpy broadcasting), so the model
code can run whole batches of paths through a GRU with a handful of tape
records instead of one per vector.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(eq=False)
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)
    step_count: int = 0

    def __post_init__(self):
        self.value = np.array(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


class Var:
    """A value on a tape. ``grad`` is filled in by ``Tape.backward``."""

    __slots__ = ("value", "grad", "tape", "requires_grad")

    def __init__(self, value, tape: "Tape", requires_grad: bool):
        self.value = value
        self.grad = None
        self.tape = tape
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE)
        else:
            self.grad += g

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


class Tape:
    """Ordered record of executed ops.

    With ``record=False`` ops still compute values but nothing is stored, which
    is what inference and finite-difference probes use.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.ops: list[tuple[Var, Callable[[], None]]] = []
        self._bound: list[tuple[Var, Parameter]] = []

    def const(self, value) -> Var:
        return Var(np.asarray(value, dtype=DTYPE), self, False)

    def param(self, p: Parameter) -> Var:
        v = Var(p.value, self, self.record)
        if self.record:
            self._bound.append((v, p))
        return v

    def _emit(self, value, inputs: Sequence[Var], backward) -> Var:
        needs = self.record and any(x.requires_grad for x in inputs)
        out = Var(value, self, needs)
        if needs:
            self.ops.append((out, backward))
        return out

    def backward(self, loss: Var, seed=None):
        if loss.tape is not self:
            raise ValueError("loss was not produced on this tape")
        if seed is None:
            if loss.value.size != 1:
                raise DimensionError(f"backward: loss must be scalar, got shape {loss.value.shape}")
            seed = np.ones_like(loss.value)
        loss.accumulate(seed)
        for out, fn in reversed(self.ops):
            if out.grad is not None:
                fn(out)
        for v, p in self._bound:
            if v.grad is not None:
                p.grad += v.grad


def _tape_of(*xs: Var) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("no Var among inputs")


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- linear algebra


def affine(W: Var, x: Var, b: Var | None = None) -> Var:
    """``W x + b`` for ``x`` of shape ``(n,)`` or a batch ``(B, n)``."""
    tape = _tape_of(W, x)
    Wv, xv = W.value, x.value
    if Wv.ndim != 2 or xv.ndim not in (1, 2) or xv.shape[-1] != Wv.shape[1]:
        raise DimensionError(f"affine: W{Wv.shape} incompatible with x{xv.shape}")
    if b is not None and b.value.shape != (Wv.shape[0],):
        raise DimensionError(f"affine: bias{b.value.shape} does not match W{Wv.shape}")
    out = xv @ Wv.T
    if b is not None:
        out = out + b.value
    inputs = [W, x] if b is None else [W, x, b]

    def backward(o):
        g = o.grad
        if W.requires_grad:
            W.accumulate(np.outer(g, xv) if xv.ndim == 1 else g.T @ xv)
        if x.requires_grad:
            x.accumulate(g @ Wv)
        if b is not None and b.requires_grad:
            b.accumulate(g if g.ndim == 1 else g.sum(axis=0))

    return tape._emit(out, inputs, backward)


def add(a: Var, b: Var) -> Var:
    tape = _tape_of(a, b)

    def backward(o):
        a.accumulate(_unbroadcast(o.grad, a.value.shape))
        b.accumulate(_unbroadcast(o.grad, b.value.shape))

    return tape._emit(a.value + b.value, [a, b], backward)


def sub(a: Var, b: Var) -> Var:
    tape = _tape_of(a, b)

    def backward(o):
        a.accumulate(_unbroadcast(o.grad, a.value.shape))
        b.accumulate(_unbroadcast(-o.grad, b.value.shape))

    return tape._emit(a.value - b.value, [a, b], backward)


def mul(a: Var, b: Var) -> Var:
    tape = _tape_of(a, b)
    av, bv = a.value, b.value

    def backward(o):
        if a.requires_grad:
            a.accumulate(_unbroadcast(o.grad * bv, av.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(o.grad * av, bv.shape))

    return tape._emit(av * bv, [a, b], backward)


def scale(a: Var, c: float) -> Var:
    tape = a.tape
    return tape._emit(a.value * c, [a], lambda o: a.accumulate(o.grad * c))


def rowdot(a: Var, b: Var) -> Var:
    """Dot product along the last axis: ``(..., d), (..., d) -> (...)``."""
    tape = _tape_of(a, b)
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[-1]:
        raise DimensionError(f"rowdot: {av.shape} vs {bv.shape}")

    def backward(o):
        g = o.grad[..., None]
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * bv, av.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * av, bv.shape))

    return tape._emit(np.sum(av * bv, axis=-1), [a, b], backward)


def total(a: Var) -> Var:
    """Sum of all entries, as a 0-d array."""
    shape = a.value.shape
    return a.tape._emit(np.asarray(a.value.sum()), [a], lambda o: a.accumulate(np.broadcast_to(o.grad, shape)))


def sq_norm(a: Var) -> Var:
    """Squared L2 norm along the last axis."""
    return rowdot(a, a)


def gather(table: Var, idx) -> Var:
    """Rows of ``table`` at integer indices ``idx`` (any shape)."""
    idx = np.asarray(idx, dtype=np.int64)
    tv = table.value

    def backward(o):
        table.accumulate(scatter_add_rows(tv.shape, idx, o.grad))

    return table.tape._emit(tv[idx], [table], backward)


def scatter_add_rows(shape, idx, rows) -> np.ndarray:
    """Zeros of ``shape`` with ``rows`` summed into the positions ``idx``."""
    n = shape[0]
    width = int(np.prod(shape[1:], dtype=np.int64))
    flat_idx = idx.reshape(-1)
    if width == 1:
        return np.bincount(flat_idx, weights=rows.reshape(-1), minlength=n).reshape(shape)
    cells = (flat_idx[:, None] * width + np.arange(width)).reshape(-1)
    return np.bincount(cells, weights=rows.reshape(-1), minlength=n * width).reshape(shape)


def stack(xs: Sequence[Var]) -> Var:
    tape = _tape_of(*xs)
    out = np.stack([x.value for x in xs])

    def backward(o):
        for i, x in enumerate(xs):
            x.accumulate(o.grad[i])

    return tape._emit(out, list(xs), backward)


def concat_rows(xs: Sequence[Var]) -> Var:
    """Concatenate along axis 0; 1-d inputs count as single rows."""
    tape = _tape_of(*xs)
    vals = [x.value[None] if x.value.ndim == 1 else x.value for x in xs]
    sizes = [v.shape[0] for v in vals]
    bounds = np.cumsum([0] + sizes)

    def backward(o):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            x.accumulate(o.grad[lo:hi].reshape(x.value.shape))

    return tape._emit(np.concatenate(vals, axis=0), list(xs), backward)


def segment_mean(x: Var, segments, n_segments: int) -> Var:
    """Mean of rows of ``x`` grouped by ``segments``; empty groups give zeros."""
    seg = np.asarray(segments, dtype=np.int64)
    counts = np.bincount(seg, minlength=n_segments).astype(DTYPE)
    denom = np.maximum(counts, 1.0)[:, None]
    acc = np.zeros((n_segments,) + x.value.shape[1:], dtype=DTYPE)
    np.add.at(acc, seg, x.value)

    def backward(o):
        x.accumulate((o.grad / denom)[seg])

    return x.tape._emit(acc / denom, [x], backward)


# ---------------------------------------------------------------- nonlinearities


def _sigmoid(z):
    # tanh form: no overflow for large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=DTYPE)))


def sigmoid(x: Var) -> Var:
    s = _sigmoid(x.value)
    return x.tape._emit(s, [x], lambda o: x.accumulate(o.grad * s * (1.0 - s)))


def tanh(x: Var) -> Var:
    t = np.tanh(x.value)
    return x.tape._emit(t, [x], lambda o: x.accumulate(o.grad * (1.0 - t * t)))


def pointwise(kind: str, x: Var) -> Var:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def softmax_values(z) -> np.ndarray:
    z = np.asarray(z, dtype=DTYPE)
    if z.size == 0:
        raise DomainError("softmax of an empty vector")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Var) -> Var:
    s = softmax_values(x.value)

    def backward(o):
        g = o.grad
        x.accumulate(s * (g - np.sum(g * s, axis=-1, keepdims=True)))

    return x.tape._emit(s, [x], backward)


def max_pool(rows: Sequence[Var]) -> Var:
    """Elementwise max over a list of equal-length vectors.

    Gradient for each coordinate goes to the argmax row; ties resolve to the
    lowest row index.
    """
    if len(rows) == 0:
        raise DomainError("max_pool over an empty list")
    shapes = {r.value.shape for r in rows}
    if len(shapes) != 1:
        raise DimensionError(f"max_pool: unequal row shapes {sorted(shapes)}")
    return _pool_single(stack(rows))


def _pool_single(m: Var) -> Var:
    mv = m.value
    arg = np.argmax(mv, axis=0)
    cols = np.arange(mv.shape[1])

    def backward(o):
        g = np.zeros_like(mv)
        g[arg, cols] = o.grad
        m.accumulate(g)

    return m.tape._emit(mv[arg, cols], [m], backward)


def segment_max(x: Var, segments, n_segments: int) -> Var:
    """Row-group max: rows of ``x`` (N, d) pooled into ``n_segments`` rows.

    Every segment must be nonempty. Ties route the gradient to the lowest row
    index within the segment.
    """
    seg = np.asarray(segments, dtype=np.int64)
    xv = x.value
    if xv.shape[0] != seg.shape[0]:
        raise DimensionError(f"segment_max: {xv.shape[0]} rows vs {seg.shape[0]} segment ids")
    if np.any(np.bincount(seg, minlength=n_segments) == 0):
        raise DomainError("segment_max: empty segment")
    order = np.argsort(seg, kind="stable")
    sorted_seg = seg[order]
    starts = np.searchsorted(sorted_seg, np.arange(n_segments))
    pooled = np.maximum.reduceat(xv[order], starts, axis=0)
    # lowest-index row attaining the max, per (segment, column)
    hit = xv == pooled[seg]
    row_ids = np.where(hit, np.arange(xv.shape[0])[:, None], xv.shape[0])
    arg = np.full(pooled.shape, xv.shape[0], dtype=np.int64)
    np.minimum.at(arg, seg, row_ids)
    cols = np.broadcast_to(np.arange(xv.shape[1]), arg.shape)

    def backward(o):
        g = np.zeros_like(xv)
        g[arg, cols] = o.grad
        x.accumulate(g)

    return x.tape._emit(pooled, [x], backward)


def relu(x: Var) -> Var:
    mask = x.value > 0
    return x.tape._emit(np.where(mask, x.value, 0.0), [x], lambda o: x.accumulate(o.grad * mask))


def unsqueeze(x: Var) -> Var:
    """Append a trailing axis of size one (for broadcasting against rows)."""
    shape = x.value.shape
    return x.tape._emit(x.value[..., None], [x], lambda o: x.accumulate(o.grad.reshape(shape)))


def dropout(x: Var, keep_prob: float, rng: np.random.Generator, training: bool) -> Var:
    """Inverted dropout; identity at inference or when ``keep_prob == 1``."""
    if not 0.0 < keep_prob <= 1.0:
        raise ConfigError(f"dropout keep_prob must be in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return x
    mask = (rng.random(x.value.shape) < keep_prob) / keep_prob
    return x.tape._emit(x.value * mask, [x], lambda o: x.accumulate(o.grad * mask))


def binary_cross_entropy(p: Var, y, eps: float = 1e-12) -> Var:
    """Summed BCE of probabilities ``p`` against 0/1 labels ``y``.

    ``p`` is clamped to ``[eps, 1 - eps]``; clamped entries pass no gradient.
    """
    y = np.asarray(y, dtype=DTYPE)
    pv = p.value
    pc = np.clip(pv, eps, 1.0 - eps)
    loss = -np.sum(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    inside = (pv > eps) & (pv < 1.0 - eps)

    def backward(o):
        g = (-y / pc + (1.0 - y) / (1.0 - pc)) * inside
        p.accumulate(o.grad * g)

    return p.tape._emit(np.asarray(loss), [p], backward)


# ---------------------------------------------------------------- optimisation


def adam_step(params: Iterable[Parameter], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update per parameter, then zero the grads."""
    for p in params:
        p.step_count += 1
        t = p.step_count
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * p.grad
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * p.grad * p.grad
        m_hat = p.adam_m / (1.0 - beta1 ** t)
        v_hat = p.adam_v / (1.0 - beta2 ** t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    failures: list = field(default_factory=list)  # (param name, flat index, analytic, numeric, rel)

    @property
    def ok(self) -> bool:
        return not self.failures


def grad_check(f: Callable[[Tape], Var], params: Sequence[Parameter], h: float = 1e-5,
               tol: float = 1e-4, floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of the scalar ``f(tape)`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    for p in params:
        p.zero_grad()
    tape = Tape()
    tape.backward(f(tape))
    analytic = {id(p): p.grad.copy() for p in params}
    for p in params:
        p.zero_grad()

    def value():
        return float(f(Tape(record=False)).value)

    worst, n, failures = 0.0, 0, []
    for p in params:
        flat = p.value.reshape(-1)
        ga = analytic[id(p)].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = value()
            flat[i] = old - h
            down = value()
            flat[i] = old
            num = (up - down) / (2.0 * h)
            rel = abs(ga[i] - num) / max(abs(ga[i]), abs(num), floor)
            worst = max(worst, rel)
            n += 1
            if rel > tol:
                failures.append((p.name, i, float(ga[i]), num, rel))
    return GradCheckReport(worst, n, failures)
