"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

The graph is define-by-run: while a ``Tape`` is active, every operation
whose inputs require gradients appends one record (inputs, output, backward
rule) to it.  Execution order is a topological order by construction, so
``backward`` simply replays the records in reverse, accumulating gradients
into ``.grad`` arrays.  The tape lives for one training step and is rebuilt
for the next.

Hot kernels (gelu, softmax, layer norm, ...) are delegated to
``tinyembed.kernels``; dense matmul goes straight to numpy's BLAS.
"""

import numpy as np

from . import kernels
from .errors import ShapeError, TapeError


class Tensor:
    """A float64 array plus gradient bookkeeping.

    ``values`` is immutable by convention once the tensor was produced by an
    operation; leaf tensors (parameters) may be updated in place between
    tape lifetimes.
    """

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


class _Record:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output, inputs, backward):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered log of the operations of one forward pass."""

    def __init__(self):
        self.ops = []
        self._consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False


_ACTIVE_TAPE = None


def _recording(*tensors):
    return _ACTIVE_TAPE is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in tensors
    )


def _emit(values, inputs, backward_fn):
    """Wrap kernel output; record on the active tape when gradients flow."""
    if _recording(*inputs):
        out = Tensor(values, requires_grad=True)
        _ACTIVE_TAPE.ops.append(_Record(out, tuple(inputs), backward_fn))
        return out
    return Tensor(values)


def backward(tape, loss):
    """Accumulate gradients of ``loss`` into every recorded tensor.

    Every requires-grad tensor that appears on the tape ends up with a
    ``.grad`` array: the accumulated gradient when it lies on a path to the
    loss, zeros otherwise.
    """
    if tape._consumed:
        raise TapeError("backward already ran on this tape; build a fresh tape")
    if loss.values.size != 1:
        raise TapeError(f"loss must be a scalar, got shape {loss.values.shape}")
    if not any(op.output is loss for op in tape.ops):
        raise TapeError("loss was not produced by an operation on this tape")

    seen = set()
    for op in tape.ops:
        for t in (op.output, *op.inputs):
            if isinstance(t, Tensor) and t.requires_grad and id(t) not in seen:
                seen.add(id(t))
                t.grad = np.zeros_like(t.values)
    loss.grad = np.ones_like(loss.values)

    for op in reversed(tape.ops):
        grads = op.backward(op.output.grad)
        for t, g in zip(op.inputs, grads):
            if isinstance(t, Tensor) and t.requires_grad and g is not None:
                t.grad += g
    tape._consumed = True


# ---------------------------------------------------------------------------
# shape helpers


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(kernel, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{kernel}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


def _rows(values):
    """View an array as (rows, last-axis) for the row-wise kernels."""
    return np.ascontiguousarray(values).reshape(-1, values.shape[-1])


# ---------------------------------------------------------------------------
# operations


def add(a, b):
    _check_broadcast("add", a, b)
    out = a.values + b.values

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(out, (a, b), bwd)


def mul(a, b):
    """Elementwise multiply with numpy broadcasting."""
    _check_broadcast("elementwise-multiply", a, b)
    out = a.values * b.values

    def bwd(g):
        return (
            _unbroadcast(g * b.values, a.shape),
            _unbroadcast(g * a.values, b.shape),
        )

    return _emit(out, (a, b), bwd)


def scale(a, s):
    """Multiply by a python scalar."""
    s = float(s)
    out = a.values * s

    def bwd(g):
        return (g * s,)

    return _emit(out, (a,), bwd)


def matmul(a, b):
    """Matrix product; leading dimensions broadcast like numpy's matmul."""
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ShapeError(
            f"matmul: operands must have >= 2 dims, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(
            f"matmul: leading dims of {a.shape} and {b.shape} do not broadcast"
        ) from None
    out = np.matmul(a.values, b.values)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
        gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(out, (a, b), bwd)


def transpose(a, axes):
    axes = tuple(axes)
    out = np.transpose(a.values, axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inverse),)

    return _emit(out, (a,), bwd)


def reshape(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != a.values.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out = a.values.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _emit(out, (a,), bwd)


def concatenate(tensors, axis):
    tensors = tuple(tensors)
    base = tensors[0].values.ndim
    for t in tensors[1:]:
        if t.values.ndim != base:
            raise ShapeError(
                f"concatenate: rank mismatch {tensors[0].shape} vs {t.shape}"
            )
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(out, tensors, bwd)


def sum_all(a):
    """Reduce to a scalar (shape ``()``)."""
    out = a.values.sum()

    def bwd(g):
        return (np.full(a.shape, float(g)),)

    return _emit(np.float64(out), (a,), bwd)


def mean_all(a):
    return scale(sum_all(a), 1.0 / a.values.size)


def gelu(a):
    out = kernels.gelu_fwd(np.ascontiguousarray(a.values))

    def bwd(g):
        return (kernels.gelu_bwd(np.ascontiguousarray(a.values), np.ascontiguousarray(g)),)

    return _emit(out, (a,), bwd)


def softmax_rows(a):
    """Softmax over the last axis; every row sums to 1."""
    if a.values.ndim < 1:
        raise ShapeError(f"softmax-rows: needs >= 1 dim, got {a.shape}")
    y = kernels.softmax_fwd(_rows(a.values)).reshape(a.shape)

    def bwd(g):
        gx = kernels.softmax_bwd(_rows(y), _rows(g))
        return (gx.reshape(a.shape),)

    return _emit(y, (a,), bwd)


def logsumexp_rows(a):
    """log(sum(exp(x))) over the last axis, shift-by-max stabilized."""
    if a.values.ndim < 1:
        raise ShapeError(f"log-sum-exp-rows: needs >= 1 dim, got {a.shape}")
    x2 = _rows(a.values)
    lse = kernels.logsumexp_fwd(x2)
    out = lse.reshape(a.shape[:-1])

    def bwd(g):
        gx = kernels.logsumexp_bwd(x2, lse, np.ascontiguousarray(g).reshape(-1))
        return (gx.reshape(a.shape),)

    return _emit(out, (a,), bwd)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer-norm: input {a.shape} needs gamma/beta of shape ({d},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    x2 = _rows(a.values)
    y, mean, rstd = kernels.layernorm_fwd(x2, gamma.values, beta.values, float(eps))

    def bwd(g):
        gx, ggamma, gbeta = kernels.layernorm_bwd(
            x2, gamma.values, mean, rstd, _rows(g)
        )
        return gx.reshape(a.shape), ggamma, gbeta

    return _emit(y.reshape(a.shape), (a, gamma, beta), bwd)


def l2_normalize_rows(a):
    """Scale every row of a 2-D tensor to unit Euclidean norm."""
    if a.values.ndim != 2:
        raise ShapeError(f"l2-normalize-rows: expected 2 dims, got {a.shape}")
    x2 = np.ascontiguousarray(a.values)
    sq = (x2 * x2).sum(axis=1)
    if np.any(sq == 0.0):
        row = int(np.flatnonzero(sq == 0.0)[0])
        raise ShapeError(f"l2-normalize-rows: row {row} has zero norm")
    y, norms = kernels.l2norm_fwd(x2)

    def bwd(g):
        return (kernels.l2norm_bwd(y, norms, np.ascontiguousarray(g)),)

    return _emit(y, (a,), bwd)


def embedding_lookup(table, ids):
    """Select rows of ``table`` ([vocab, dim]) by an integer id array."""
    if table.values.ndim != 2:
        raise ShapeError(f"embedding-lookup: table must be 2-D, got {table.shape}")
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding-lookup: ids must be integers")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ShapeError(
            f"embedding-lookup: id out of range for table with {vocab} rows"
        )
    out = table.values[ids]

    def bwd(g):
        g2 = np.ascontiguousarray(g).reshape(-1, table.shape[1])
        return (kernels.embedding_grad(ids.reshape(-1).astype(np.int64), g2, vocab),)

    return _emit(out, (table,), bwd)


def take_per_row(a, idx):
    """Pick one entry (2-D input) or one row (3-D input) per leading index.

    For ``a`` of shape [N, M] returns [N] with out[i] = a[i, idx[i]]; for
    [B, L, D] returns [B, D] with out[b] = a[b, idx[b], :].
    """
    idx = np.asarray(idx)
    if idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise ShapeError(
            f"take-per-row: index of shape {idx.shape} does not match {a.shape}"
        )
    n = a.shape[1]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"take-per-row: index out of range for axis of size {n}")
    rows = np.arange(a.shape[0])
    if a.values.ndim == 2:
        out = a.values[rows, idx]
    elif a.values.ndim == 3:
        out = a.values[rows, idx, :]
    else:
        raise ShapeError(f"take-per-row: expected 2 or 3 dims, got {a.shape}")

    def bwd(g):
        gx = np.zeros_like(a.values)
        if a.values.ndim == 2:
            gx[rows, idx] = g
        else:
            gx[rows, idx, :] = g
        return (gx,)

    return _emit(out, (a,), bwd)


def dropout(a, p, rng):
    """Inverted dropout with a mask drawn from the given generator.

    ``p`` must lie in [0, 1).  With p = 0 the input tensor is returned
    unchanged and the generator is not consumed, so inference never
    advances the dropout stream.
    """
    p = float(p)
    if not 0.0 <= p < 1.0:
        raise ShapeError(f"dropout: probability {p} outside [0, 1)")
    if p == 0.0:
        return a
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    out = a.values * mask

    def bwd(g):
        return (g * mask,)

    return _emit(out, (a,), bwd)
