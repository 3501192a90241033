"""Reverse-mode automatic differentiation over dense float64 tensors.

Just enough machinery to express a small decoder LM: a Tensor wraps a numpy
array, each op appends a backward closure to the active ComputationTape
(a Wengert list, so recording order is already topological), and backward()
replays the tape in exact reverse order. Tapes are rebuilt per forward pass;
nothing is cached between passes.

Everything is float64. These models are tiny, so gradient fidelity is worth
far more than speed.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import GradientError, ShapeError

_STATE = threading.local()

# Optional per-op finiteness validation; off by default because it roughly
# doubles the cost of a forward pass. Property tests switch it on.
_VALIDATE_FINITE = False


def set_finite_validation(enabled: bool) -> None:
    global _VALIDATE_FINITE
    _VALIDATE_FINITE = bool(enabled)


def _tape_stack() -> list:
    stack = getattr(_STATE, "tapes", None)
    if stack is None:
        stack = []
        _STATE.tapes = stack
    return stack


def _grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (cheap evaluation mode)."""
    prev = _grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


class Tensor:
    """Dense float64 array with optional gradient buffer.

    `grad` is allocated lazily on first accumulation and then ADDS across
    backward calls until `zero_grad` is called, so one parameter set can
    collect gradients from several losses.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


class ComputationTape:
    """Ordered record of operations from one forward pass.

    Entries are appended in execution order, which makes the list
    topologically sorted by construction; backward() walks it back to front.
    Use as a context manager around a forward+backward pair.
    """

    __slots__ = ("entries",)

    def __init__(self):
        # each entry: (output tensor, input tensors, backward closure)
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "ComputationTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()


def _active_tape() -> Optional[ComputationTape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _finish(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _VALIDATE_FINITE and not np.all(np.isfinite(out_data)):
        raise GradientError("operation produced non-finite values")
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.entries.append((out, tuple(inputs), backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from `loss`.

    Must run inside the ComputationTape context that recorded the forward
    pass. Gradients on leaves accumulate additively across calls.
    """
    if loss.data.ndim != 0:
        raise GradientError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise GradientError("loss is not connected to any requires_grad tensor on the tape")
    tape = _active_tape()
    if tape is None:
        raise GradientError("backward called outside a ComputationTape context")
    loss.accumulate_grad(np.ones((), dtype=np.float64))
    for out, inputs, backward_fn in reversed(tape.entries):
        if out.grad is None:
            continue
        grads = backward_fn(out.grad)
        for inp, g in zip(inputs, grads):
            if g is not None and inp.requires_grad:
                inp.accumulate_grad(g)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product [m,k]@[k,n] -> [m,n]; d/da = g@b^T, d/db = a^T@g."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward_fn(g):
        return (g @ bd.T, ad.T @ g)

    return _finish(out, (a, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def backward_fn(g):
        return (g, g)

    return _finish(out, (a, b), backward_fn)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"multiply shape mismatch: {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data
    out = ad * bd

    def backward_fn(g):
        return (g * bd, g * ad)

    return _finish(out, (a, b), backward_fn)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient w.r.t. the constant)."""
    c = float(c)
    out = a.data * c

    def backward_fn(g):
        return (g * c,)

    return _finish(out, (a,), backward_fn)


def scale_columns(x: Tensor, s: Tensor) -> Tensor:
    """Row-broadcast scale: out[i,j] = x[i,j] * s[j]. Used for norm gains."""
    if x.data.ndim != 2 or s.data.ndim != 1 or x.data.shape[1] != s.data.shape[0]:
        raise ShapeError(f"scale_columns shape mismatch: {x.data.shape} vs {s.data.shape}")
    xd, sd = x.data, s.data
    out = xd * sd[None, :]

    def backward_fn(g):
        return (g * sd[None, :], np.sum(g * xd, axis=0))

    return _finish(out, (x, s), backward_fn)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), the gate nonlinearity of the MLP."""
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    out = xd * sig

    def backward_fn(g):
        return (g * sig * (1.0 + xd * (1.0 - sig)),)

    return _finish(out, (x,), backward_fn)


def rms_normalize(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale each row to unit root-mean-square (no learned gain here)."""
    if x.data.ndim != 2:
        raise ShapeError(f"rms_normalize expects a matrix, got shape {x.data.shape}")
    xd = x.data
    d = xd.shape[1]
    inv = 1.0 / np.sqrt(np.mean(xd * xd, axis=1, keepdims=True) + eps)
    out = xd * inv

    def backward_fn(g):
        # y = x*s with s = (mean(x^2)+eps)^-1/2 per row:
        # dx = s*g - (s^3/d) * x * <x,g>
        dot = np.sum(xd * g, axis=1, keepdims=True)
        return (inv * g - (inv ** 3 / d) * xd * dot,)

    return _finish(out, (x,), backward_fn)


_CAUSAL_MASKS: dict[int, np.ndarray] = {}


def _causal_mask(n: int) -> np.ndarray:
    mask = _CAUSAL_MASKS.get(n)
    if mask is None:
        mask = np.tril(np.ones((n, n), dtype=bool))
        mask.setflags(write=False)
        _CAUSAL_MASKS[n] = mask
    return mask


def softmax_rows(x: Tensor, causal: bool = False) -> Tensor:
    """Row softmax; with causal=True row i is restricted to columns <= i.

    Masked-out entries are exactly zero in the output and receive zero
    gradient, so later positions can never leak into earlier rows.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.data.shape}")
    xd = x.data
    if causal:
        if xd.shape[0] != xd.shape[1]:
            raise ShapeError(f"causal softmax needs a square matrix, got {xd.shape}")
        masked = np.where(_causal_mask(xd.shape[0]), xd, -np.inf)
    else:
        masked = xd
    m = np.max(masked, axis=1, keepdims=True)
    e = np.exp(masked - m)
    out = e / np.sum(e, axis=1, keepdims=True)

    def backward_fn(g):
        dot = np.sum(out * g, axis=1, keepdims=True)
        return (out * (g - dot),)

    return _finish(out, (x,), backward_fn)


def cross_entropy_from_logits(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-softmax of the target index at each row.

    The mean (not the sum) over rows keeps the learning rate independent of
    sequence length; multiply by len(targets) to recover the summed loss.
    """
    ld = logits.data
    if ld.ndim != 2:
        raise ShapeError(f"cross_entropy expects [L,V] logits, got shape {ld.shape}")
    n, vocab = ld.shape
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.ndim != 1 or tgt.shape[0] != n:
        raise ShapeError(f"targets length {tgt.shape} does not match {n} logit rows")
    if n < 1:
        raise ShapeError("cross_entropy needs at least one position")
    if np.any(tgt < 0) or np.any(tgt >= vocab):
        bad = tgt[(tgt < 0) | (tgt >= vocab)][0]
        raise IndexError(f"target id {bad} out of range [0, {vocab})")
    m = np.max(ld, axis=1, keepdims=True)
    shifted = ld - m
    logsumexp = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    log_probs = shifted - logsumexp
    rows = np.arange(n)
    out = np.asarray(-np.mean(log_probs[rows, tgt]))

    def backward_fn(g):
        # softmax materialized only when a backward pass actually runs
        grad = np.exp(log_probs)
        grad[rows, tgt] -= 1.0
        return (grad * (float(g) / n),)

    return _finish(out, (logits,), backward_fn)


def embedding_gather(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row lookup out[l] = table[ids[l]]; gradient scatter-adds into table."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"ids must be a flat sequence, got shape {idx.shape}")
    rows = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        bad = idx[(idx < 0) | (idx >= rows)][0]
        raise IndexError(f"row id {bad} out of range [0, {rows})")
    out = table.data[idx]

    def backward_fn(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, g)
        return (dt,)

    return _finish(out, (table,), backward_fn)


def transpose(x: Tensor) -> Tensor:
    out = x.data.T.copy()

    def backward_fn(g):
        return (g.T,)

    return _finish(out, (x,), backward_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.data.size:
        raise ShapeError(f"cannot reshape {x.data.shape} to {shape}")
    orig = x.data.shape
    out = x.data.reshape(shape).copy()

    def backward_fn(g):
        return (g.reshape(orig),)

    return _finish(out, (x,), backward_fn)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack matrices with equal column counts along rows."""
    if not parts:
        raise ShapeError("concat_rows needs at least one part")
    cols = {p.data.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows column mismatch: {sorted(cols)}")
    sizes = [p.data.shape[0] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _finish(out, tuple(parts), backward_fn)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Stack matrices with equal row counts along columns (head merge)."""
    if not parts:
        raise ShapeError("concat_cols needs at least one part")
    rows = {p.data.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols row mismatch: {sorted(rows)}")
    sizes = [p.data.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _finish(out, tuple(parts), backward_fn)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= x.data.shape[0]):
        raise ShapeError(f"row slice [{start}:{stop}] out of range for shape {x.data.shape}")
    out = x.data[start:stop].copy()

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        dx[start:stop] = g
        return (dx,)

    return _finish(out, (x,), backward_fn)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start <= stop <= x.data.shape[1]):
        raise ShapeError(f"column slice [{start}:{stop}] out of range for shape {x.data.shape}")
    out = x.data[:, start:stop].copy()

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        return (dx,)

    return _finish(out, (x,), backward_fn)
