"""Tape-based reverse-mode differentiation over numpy matrices.

Every op appends its output to the tape of its inputs, so tape order is a
topological order and :meth:`Tape.backward` is a single reverse sweep.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import kernels


class ShapeMismatch(ValueError):
    pass


class BatchTooSmall(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "tape", "name")

    def __init__(self, tape, value, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.tape = tape
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, name={self.name})"


class Tape:
    """Records operations so gradients can be pulled back from a scalar.

    With ``record=False`` nothing is retained and ``backward`` is unavailable,
    which keeps inference allocation-light.
    """

    def __init__(self, record: bool = True, check_finite: bool = True):
        self.record = record
        self.check_finite = check_finite
        self.nodes: list = []
        self.params: dict = {}
        self._done = False

    def constant(self, value) -> Tensor:
        return Tensor(self, np.asarray(value))

    def param(self, name: str, value: np.ndarray) -> Tensor:
        """Leaf that receives a gradient; one leaf per name per tape."""
        t = self.params.get(name)
        if t is None:
            t = Tensor(self, value, requires_grad=self.record, name=name)
            self.params[name] = t
        return t

    def _out(self, value, parents, backward_fn) -> Tensor:
        if self.check_finite and not np.isfinite(value).all():
            raise NonFiniteError("non-finite value produced in forward pass")
        needs = self.record and any(p.requires_grad for p in parents)
        t = Tensor(self, value, parents if needs else (), backward_fn if needs else None, needs)
        if needs:
            self.nodes.append(t)
        return t

    def backward(self, loss: Tensor) -> dict:
        """Gradients of scalar ``loss`` for every parameter leaf on this tape.

        A tape can be differentiated once; parameters the loss does not reach
        get zero gradients.
        """
        if not self.record:
            raise TapeError("tape was created with record=False")
        if self._done:
            raise TapeError("backward already ran on this tape")
        if loss.value.size != 1:
            raise ShapeMismatch("loss must be a scalar")
        self._done = True
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        out = {}
        for name, leaf in self.params.items():
            out[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        return out


def _tape(*tensors) -> Tape:
    for t in tensors:
        if isinstance(t, Tensor):
            return t.tape
    raise TypeError("expected at least one Tensor")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    return a.tape._out(a.value + b.value, (a, b), lambda g: (g, g))


def add_n(terms: Sequence[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return x.tape._out(np.where(mask, x.value, 0).astype(x.value.dtype), (x,), lambda g: (g * mask,))


def scale_rows(x: Tensor, coef: np.ndarray) -> Tensor:
    """Multiply row ``i`` by the constant ``coef[i]``."""
    c = np.asarray(coef, dtype=x.value.dtype)[:, None]
    return x.tape._out(x.value * c, (x,), lambda g: (g * c,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return x.tape._out(
        np.asarray(x.value.sum(), dtype=x.value.dtype), (x,), lambda g: (np.full(shape, g, dtype=x.value.dtype),)
    )


# ---------------------------------------------------------------- linear


def matmul(x: Tensor, w: Tensor) -> Tensor:
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"matmul: {x.shape} @ {w.shape}")
    xv, wv = x.value, w.value
    return x.tape._out(xv @ wv, (x, w), lambda g: (g @ wv.T, xv.T @ g))


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with ``b`` broadcast across rows."""
    if x.value.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"affine: x{x.shape} w{w.shape} b{b.shape}")
    xv, wv = x.value, w.value
    return x.tape._out(xv @ wv + b.value, (x, w, b), lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = parts[0].shape[0]
    if any(p.shape[0] != rows for p in parts):
        raise ShapeMismatch("concat_cols: row counts differ")
    widths = np.cumsum([p.shape[1] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, widths, axis=1))

    return _tape(*parts)._out(np.concatenate([p.value for p in parts], axis=1), tuple(parts), back)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    n = x.shape[0]
    return x.tape._out(x.value[index], (x,), lambda g: (kernels.segment_sum(g, index, n),))


def segment_sum(x: Tensor, index: np.ndarray, n: int) -> Tensor:
    """Scatter-add rows of ``x`` into ``n`` output rows."""
    return x.tape._out(kernels.segment_sum(x.value, index, n), (x,), lambda g: (g[index],))


# ---------------------------------------------------------------- normalisation


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: str = "batch-stats",
    running: Optional[tuple] = None,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_running: bool = True,
) -> Tensor:
    """Batch normalisation over the rows of ``x``.

    ``running`` is a ``(mean, var)`` pair of arrays updated in place when
    ``mode="batch-stats"`` and ``update_running`` is set.
    """
    n, d = x.shape
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch("batchnorm: gamma/beta width")
    xv, gv = x.value, gamma.value
    if mode == "batch-stats":
        if n < 2:
            raise BatchTooSmall(f"batch statistics need at least 2 rows, got {n}")
        mean = xv.mean(axis=0)
        var = xv.var(axis=0)
        if running is not None and update_running:
            rm, rv = running
            rm *= 1 - momentum
            rm += momentum * mean
            rv *= 1 - momentum
            rv += momentum * var * (n / (n - 1))
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mean) * invstd

        def back(g):
            dxhat = g * gv
            dx = (invstd / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    elif mode == "running-stats":
        if running is None:
            raise ValueError("running-stats mode needs running statistics")
        rm, rv = running
        invstd = (1.0 / np.sqrt(rv + eps)).astype(xv.dtype)
        xhat = (xv - rm) * invstd

        def back(g):
            return g * gv * invstd, (g * xhat).sum(axis=0), g.sum(axis=0)

    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    y = (xhat * gv + beta.value).astype(xv.dtype)
    return x.tape._out(y, (x, gamma, beta), back)


def segment_batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    segment: np.ndarray,
    n_segments: int,
    running: tuple,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_running: bool = False,
) -> Tensor:
    """Batch-statistics normalisation computed independently per segment.

    Rows whose segment holds a single row cannot be normalised by their own
    statistics; they use ``running`` instead.  When ``update_running`` is set,
    running statistics move towards the average per-segment statistics of
    the segments with two or more rows.
    """
    n, d = x.shape
    xv, gv = x.value, gamma.value
    dt = xv.dtype
    cnt = kernels.segment_count(segment, n_segments).astype(dt)
    safe = np.maximum(cnt, 1)[:, None]
    mean = kernels.segment_sum(xv, segment, n_segments) / safe
    xc = xv - mean[segment]
    var = kernels.segment_sum(xc * xc, segment, n_segments) / safe
    rm, rv = running
    single = cnt[segment] < 2
    # singleton rows are overwritten below; keep their placeholder finite
    invstd = (1.0 / np.sqrt(np.where(single[:, None], 1.0, var[segment] + eps))).astype(dt, copy=False)
    xhat = xc * invstd
    r_invstd = (1.0 / np.sqrt(rv + eps)).astype(dt)
    if single.any():
        xhat[single] = (xv[single] - rm) * r_invstd
    if update_running:
        multi = cnt >= 2
        if multi.any():
            m = cnt[multi][:, None]
            rm *= 1 - momentum
            rm += momentum * mean[multi].mean(axis=0)
            rv *= 1 - momentum
            rv += momentum * (var[multi] * m / (m - 1)).mean(axis=0)
    rows_cnt = cnt[segment][:, None]

    def back(g):
        dxhat = g * gv
        s1 = kernels.segment_sum(dxhat, segment, n_segments)[segment]
        s2 = kernels.segment_sum(dxhat * xhat, segment, n_segments)[segment]
        dx = (invstd / rows_cnt) * (rows_cnt * dxhat - s1 - xhat * s2)
        if single.any():
            dx[single] = dxhat[single] * r_invstd
        return dx.astype(dt), (g * xhat).sum(axis=0), g.sum(axis=0)

    y = (xhat * gv + beta.value).astype(dt)
    return x.tape._out(y, (x, gamma, beta), back)


# ---------------------------------------------------------------- pooling


def max_pool_rows(x: Tensor) -> Tensor:
    """Column-wise max; the gradient goes to the first maximal row."""
    n, d = x.shape
    if n == 0:
        raise EmptyInput("max_pool_rows of zero rows")
    arg = np.argmax(x.value, axis=0)
    cols = np.arange(d)

    def back(g):
        dx = np.zeros_like(x.value)
        dx[arg, cols] = g
        return (dx,)

    out = x.tape._out(x.value[arg, cols], (x,), back)
    return out


def segment_max(x: Tensor, segment: np.ndarray, n_segments: int) -> Tensor:
    """Column-wise max within each segment; output has ``n_segments`` rows."""
    if x.shape[0] == 0:
        raise EmptyInput("segment_max of zero rows")
    mx, arg = kernels.segment_max(x.value, segment, n_segments)
    cols = np.broadcast_to(np.arange(x.shape[1]), arg.shape)

    def back(g):
        dx = np.zeros_like(x.value)
        dx[arg, cols] = g
        return (dx,)

    return x.tape._out(mx, (x,), back)


# ---------------------------------------------------------------- loss


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.value.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeMismatch(f"softmax_cross_entropy: logits {logits.shape}, labels {labels.shape}")
    z = logits.value
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return ((g / n) * p).astype(z.dtype),

    return logits.tape._out(np.asarray(loss, dtype=z.dtype), (logits,), back)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
