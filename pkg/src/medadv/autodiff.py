"""
Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every primitive executed on its :class:`Var` values
together with a closure computing the vector-Jacobian product. Replaying the
tape in reverse order yields gradients for any recorded slot, which is all the
classifier needs for SGD and all the attacks need for input gradients.

Images use NHWC layout. Kernels are dtype-preserving so the same code runs in
float32 (the default everywhere) or float64 (finite-difference oracles).
"""

from __future__ import annotations

import weakref
from typing import Callable, Sequence

import numpy as np

from .errors import TapeStateError

PROB_FLOOR = 1e-12
MAX_LOSS = -np.log(PROB_FLOOR)


class Var:
    """A value slot on a tape.

    The back-reference to the tape is weak: tapes hold their slots, and a
    strong cycle would keep large activations alive until a full GC pass.
    """

    __slots__ = ("value", "index", "_tape")

    def __init__(self, value: np.ndarray, index: int, tape: "Tape"):
        self.value = value
        self.index = index
        self._tape = weakref.ref(tape)

    @property
    def tape(self) -> "Tape":
        tape = self._tape()
        if tape is None:
            raise ValueError("the tape owning this value no longer exists")
        return tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(index={self.index}, shape={self.value.shape}, dtype={self.value.dtype})"


class Tape:
    """Ordered record of primitive operations.

    With ``record=False`` the tape still hands out :class:`Var` slots, so the
    same model code runs for plain inference, but no backward closures are
    kept and :meth:`gradient` raises :class:`TapeStateError`.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._shapes: list[tuple] = []
        self._ops: list[tuple[int, tuple[int, ...], Callable]] = []
        # filled in by classifier.forward
        self.input: Var | None = None
        self.input_shape: tuple | None = None
        self.params: dict[str, Var] = {}
        self.taps: dict[str, Var] = {}

    def variable(self, value) -> Var:
        value = np.asarray(value)
        self._shapes.append(value.shape)
        return Var(value, len(self._shapes) - 1, self)

    def _emit(self, value: np.ndarray, parents: Sequence[Var], backward: Callable) -> Var:
        for p in parents:
            if p.tape is not self:
                raise ValueError("operands belong to different tapes")
        out = self.variable(value)
        if self.record:
            self._ops.append((out.index, tuple(p.index for p in parents), backward))
        return out

    def __len__(self):
        return len(self._ops)

    def gradient(self, output: Var, wrt: Sequence[Var], seed=None) -> list[np.ndarray]:
        """Vector-Jacobian product of ``output`` against each of ``wrt``.

        ``seed`` is the upstream gradient for ``output``; it defaults to ones,
        which for a scalar loss gives the ordinary gradient. Slots that the
        output does not depend on receive zeros.
        """
        if not self.record:
            raise TapeStateError("tape was created with record=False")
        if output.tape is not self:
            raise ValueError("output does not belong to this tape")
        if seed is None:
            seed = np.ones_like(output.value)
        seed = np.asarray(seed, dtype=output.value.dtype)
        if seed.shape != output.value.shape:
            raise ValueError(f"seed shape {seed.shape} != output shape {output.value.shape}")

        # slots lying on a path from a requested leaf to the output
        wanted = {v.index for v in wrt}
        for out_index, parent_indices, _ in self._ops:
            if any(i in wanted for i in parent_indices):
                wanted.add(out_index)

        grads: dict[int, np.ndarray] = {output.index: seed}
        for out_index, parent_indices, backward in reversed(self._ops):
            if out_index > output.index or out_index not in grads:
                continue
            need = tuple(i in wanted for i in parent_indices)
            if not any(need):
                continue
            parent_grads = backward(grads[out_index], need)
            for idx, g in zip(parent_indices, parent_grads):
                if g is None:
                    continue
                if idx in grads:
                    grads[idx] = grads[idx] + g
                else:
                    grads[idx] = g
        result = []
        for v in wrt:
            g = grads.get(v.index)
            result.append(np.zeros_like(v.value) if g is None else g)
        return result


# ---------------------------------------------------------------------------
# primitive kernels
# ---------------------------------------------------------------------------

def add(a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch {a.shape} vs {b.shape}")
    return a.tape._emit(a.value + b.value, (a, b), lambda g, need: (g, g))


def total(a: Var) -> Var:
    """Sum of all elements (scalar)."""
    shape = a.shape
    return a.tape._emit(np.sum(a.value), (a,), lambda g, need: (np.broadcast_to(g, shape).copy(),))


def dense(x: Var, w: Var, b: Var | None = None) -> Var:
    """Affine map ``x @ w + b`` for ``x`` of shape (N, D) and ``w`` (D, O)."""
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"dense shape mismatch {x.shape} @ {w.shape}")
    out = x.value @ w.value
    if b is not None:
        out = out + b.value
    xv, wv = x.value, w.value

    def backward(g, need):
        grads = [g @ wv.T if need[0] else None, xv.T @ g if need[1] else None]
        if b is not None:
            grads.append(g.sum(axis=0) if need[2] else None)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return x.tape._emit(out, parents, backward)


def _im2col(xp, kh, kw, stride, ho, wo):
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Var, w: Var, b: Var | None = None, stride: int = 1, padding: int = 0) -> Var:
    """2-D cross-correlation, NHWC input, kernel of shape (kh, kw, C_in, C_out)."""
    if x.value.ndim != 4 or w.value.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ValueError(f"conv2d shape mismatch {x.shape} * {w.shape}")
    n, h, wd, c = x.shape
    kh, kw, _, co = w.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError("conv2d kernel larger than padded input")
    xp = np.pad(x.value, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.value.reshape(kh * kw * c, co)
    out = cols @ wmat
    if b is not None:
        out = out + b.value
    out = out.reshape(n, ho, wo, co)

    def backward(g, need):
        g2 = g.reshape(-1, co)
        gx = gw = None
        if need[0]:
            gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, padding:padding + h, padding:padding + wd, :]
        if need[1]:
            gw = (cols.T @ g2).reshape(w.shape)
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0) if need[2] else None)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return x.tape._emit(out, parents, backward)


def max_pool2x2(x: Var) -> Var:
    """Non-overlapping 2x2 max pooling; odd trailing rows/columns are dropped."""
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise ValueError(f"max_pool2x2 needs spatial dims >= 2, got {x.shape}")
    blocks = (
        x.value[:, : 2 * h2, : 2 * w2, :]
        .reshape(n, h2, 2, w2, 2, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, h2, w2, c, 4)
    )
    arg = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g, need):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, : 2 * h2, : 2 * w2, :] = (
            gb.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
        )
        return (gx,)

    return x.tape._emit(out, (x,), backward)


def global_avg_pool(x: Var) -> Var:
    n, h, w, c = x.shape
    out = x.value.mean(axis=(1, 2))

    def backward(g, need):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).astype(g.dtype),)

    return x.tape._emit(out, (x,), backward)


def relu(x: Var) -> Var:
    mask = x.value > 0
    return x.tape._emit(x.value * mask, (x,), lambda g, need: (g * mask,))


def flatten(x: Var) -> Var:
    shape = x.shape
    return x.tape._emit(x.value.reshape(shape[0], -1), (x,), lambda g, need: (g.reshape(shape),))


# ---------------------------------------------------------------------------
# softmax and cross-entropy
# ---------------------------------------------------------------------------

def softmax(logits) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    z = np.asarray(logits)
    if z.size == 0 or z.shape[-1] == 0:
        raise ValueError("softmax of an empty input")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, label: int) -> float:
    """``-log(probs[label])`` with probabilities floored at ``PROB_FLOOR``."""
    p = np.asarray(probs)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("cross_entropy expects a non-empty 1-D distribution")
    if not 0 <= int(label) < p.size:
        raise ValueError(f"label {label} out of range for {p.size} classes")
    return float(-np.log(max(float(p[int(label)]), PROB_FLOOR)))


def per_sample_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Numerically stable ``-log softmax(z)[y]`` per row, capped at ``-log(PROB_FLOOR)``.

    The log-sum-exp is taken as ``log1p`` of the non-maximal terms so that
    near one-hot rows keep their small but nonzero loss.
    """
    z = np.asarray(logits)
    n = z.shape[0]
    rows = np.arange(n)
    top = np.argmax(z, axis=1)
    shifted = z - z[rows, top][:, None]
    e = np.exp(shifted)
    e[rows, top] = 0
    lse = np.log1p(e.sum(axis=1))
    loss = lse - shifted[rows, labels]
    return np.minimum(loss, np.asarray(MAX_LOSS, dtype=z.dtype)).astype(z.dtype)


def softmax_cross_entropy(logits: Var, labels, reduction: str = "mean") -> Var:
    """Fused softmax + cross-entropy with gradient ``p - onehot(y)``.

    ``reduction`` is ``"mean"`` (training), ``"sum"`` (per-sample input
    gradients of a batch) or ``"none"`` (vector of per-sample losses).
    """
    z = logits.value
    if z.ndim != 2 or z.shape[1] < 2:
        raise ValueError(f"logits must be (N, K>=2), got {z.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = z.shape
    if labels.shape[0] != n:
        raise ValueError("one label per logit row required")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    losses = per_sample_cross_entropy(z, labels)
    delta = softmax(z)
    rows = np.arange(n)
    # p_y - 1 as minus the other probabilities, which keeps precision when p_y is near 1
    delta[rows, labels] = 0
    delta[rows, labels] = -delta.sum(axis=1)

    if reduction == "none":
        return logits.tape._emit(losses, (logits,), lambda g, need: (delta * g[:, None],))
    if reduction == "sum":
        return logits.tape._emit(losses.sum(), (logits,), lambda g, need: (delta * g,))
    if reduction == "mean":
        return logits.tape._emit(losses.mean(), (logits,), lambda g, need: (delta * (g / n),))
    raise ValueError(f"unknown reduction {reduction!r}")
