"""Dense tensors with reverse-mode gradients.

Values are flat numpy arrays in a single run-wide precision (float32 by
default, float64 for gradient checking).  Primitives compute eagerly and,
when a :class:`GradTape` is active in the current thread, append a record
holding the backward rule.  ``backward(tape, loss)`` replays the records
in strict reverse execution order and accumulates parameter gradients.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PROB_FLOOR = 1e-12  # clamp applied to probabilities before log

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent with an operation."""


def set_default_dtype(name):
    """Set the run-wide scalar precision ("float32" or "float64")."""
    global _default_dtype
    key = np.dtype(name).name
    if key not in _DTYPES:
        raise ValueError(f"unsupported dtype {name!r}; use float32 or float64")
    _default_dtype = _DTYPES[key]


def get_default_dtype():
    return _default_dtype


@contextmanager
def default_dtype(name):
    """Temporarily switch the run-wide precision (used by gradient checks)."""
    global _default_dtype
    prev = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = prev


class Tensor:
    """A dense n-dimensional value, optionally tracked for gradients.

    ``data`` is always stored in the current default dtype.  ``grad`` is
    populated by :func:`backward` for tensors with ``requires_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"


class TapeRecord:
    __slots__ = ("op", "inputs", "output", "fn", "needs")

    def __init__(self, op, inputs, output, fn, needs):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.fn = fn
        self.needs = needs


_tls = threading.local()


def _active_tape():
    return getattr(_tls, "tape", None)


class GradTape:
    """Records primitive applications in execution order.

    One tape per thread; enter with ``with GradTape() as tape:``.  Records
    reference the input/output tensors and a backward rule so that
    :func:`backward` can replay them in reverse.
    """

    def __init__(self):
        self.records = []
        self._produced = set()  # ids of tensors produced under this tape
        self._params = []  # leaf tensors with requires_grad, first-use order
        self._param_ids = set()

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a GradTape is already active in this thread")
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tape = None
        return False

    def _record(self, op, inputs, output, fn, needs):
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced \
                    and id(t) not in self._param_ids:
                self._param_ids.add(id(t))
                self._params.append(t)
        self.records.append(TapeRecord(op, inputs, output, fn, needs))
        self._produced.add(id(output))


def _apply(op, inputs, out_data, fn):
    """Wrap a primitive result, recording the backward rule when taped."""
    out = Tensor(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None:
        needs = tuple(t.requires_grad for t in inputs)
        if any(needs):
            tape._record(op, tuple(inputs), out, fn, needs)
    return out


def backward(tape, loss):
    """Gradient of a scalar ``loss`` w.r.t. every parameter on the tape.

    Walks the records in strict reverse execution order, summing
    contributions over all use sites.  Sets ``.grad`` on each parameter
    (zero for parameters the loss does not depend on) and returns a dict
    mapping parameter tensors to their gradient arrays.
    """
    if not isinstance(loss, Tensor) or loss.data.ndim != 0:
        got = getattr(loss, "shape", type(loss).__name__)
        raise ShapeError(f"loss must be a scalar tensor, got {got}")
    if id(loss) not in tape._produced:
        raise ValueError("loss tensor was not produced under this tape")
    acc = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for rec in reversed(tape.records):
        g = acc.pop(id(rec.output), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.fn(g, rec.needs)):
            if gi is None:
                continue
            key = id(t)
            acc[key] = gi if key not in acc else acc[key] + gi
    grads = {}
    for t in tape._params:
        g = acc.get(id(t))
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g
        grads[t] = g
    return grads


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b):
    """Matrix product of a 2-D ``a`` (m,k) and ``b`` (k,n)."""
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")

    def fn(g, needs):
        ga = g @ bd.T if needs[0] else None
        gb = ad.T @ g if needs[1] else None
        return ga, gb

    return _apply("matmul", (a, b), ad @ bd, fn)


def add(a, b):
    """Elementwise sum of two same-shape tensors (no broadcasting)."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")

    def fn(g, needs):
        return (g if needs[0] else None), (g if needs[1] else None)

    return _apply("add", (a, b), a.data + b.data, fn)


def mul(a, b):
    """Elementwise product of two same-shape tensors."""
    ad, bd = a.data, b.data
    if ad.shape != bd.shape:
        raise ShapeError(f"mul shape mismatch: {ad.shape} vs {bd.shape}")

    def fn(g, needs):
        ga = g * bd if needs[0] else None
        gb = g * ad if needs[1] else None
        return ga, gb

    return _apply("mul", (a, b), ad * bd, fn)


def scale(x, c):
    """Multiply a tensor by a python scalar."""
    c = x.data.dtype.type(c)

    def fn(g, needs):
        return (g * c,)

    return _apply("scale", (x,), x.data * c, fn)


def sum_all(x):
    """Sum of every element, as a scalar tensor."""
    shape = x.data.shape

    def fn(g, needs):
        return (np.full(shape, g, dtype=g.dtype),)

    return _apply("sum_all", (x,), x.data.sum(), fn)


def relu(x):
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""
    mask = x.data > 0

    def fn(g, needs):
        return (g * mask,)

    return _apply("relu", (x,), np.where(mask, x.data, x.data.dtype.type(0)), fn)


def reshape(x, shape):
    """View the same elements under a new shape."""
    old = x.data.shape
    out = x.data.reshape(shape)

    def fn(g, needs):
        return (g.reshape(old),)

    return _apply("reshape", (x,), out, fn)


def add_row_bias(x, b):
    """Add a length-d bias to every row of a 2-D (n,d) tensor."""
    if x.data.ndim != 2 or b.data.shape != (x.data.shape[1],):
        raise ShapeError(
            f"row bias shape mismatch: {x.data.shape} + {b.data.shape}")

    def fn(g, needs):
        gx = g if needs[0] else None
        gb = g.sum(axis=0) if needs[1] else None
        return gx, gb

    return _apply("add_row_bias", (x, b), x.data + b.data, fn)


def add_channel_bias(x, b):
    """Add a per-channel bias to a 4-D (n,c,h,w) tensor."""
    if x.data.ndim != 4 or b.data.shape != (x.data.shape[1],):
        raise ShapeError(
            f"channel bias shape mismatch: {x.data.shape} + {b.data.shape}")

    def fn(g, needs):
        gx = g if needs[0] else None
        gb = g.sum(axis=(0, 2, 3)) if needs[1] else None
        return gx, gb

    return _apply("add_channel_bias", (x, b), x.data + b.data[:, None, None], fn)


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlate (n,c,h,w) input with an (f,c,kh,kw) kernel.

    Output height is floor((h + 2*padding - kh)/stride) + 1, likewise for
    width.  Implemented as im2col + matmul; the backward rule scatters
    column gradients back into the padded input.
    """
    xd, kd = x.data, kernel.data
    if xd.ndim != 4 or kd.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D operands: {xd.shape}, {kd.shape}")
    n, c, h, w = xd.shape
    f, ck, kh, kw = kd.shape
    if ck != c:
        raise ShapeError(f"conv2d channel mismatch: input {xd.shape} vs kernel {kd.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d bad stride/padding: {stride}, {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d kernel {kd.shape} larger than padded input ({n},{c},{hp},{wp})")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = xd if padding == 0 else np.pad(
        xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * ho * wo, c * kh * kw)
    w2 = kd.reshape(f, c * kh * kw)
    out = np.ascontiguousarray(
        (cols @ w2.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def fn(g, needs):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
        gk = (g2.T @ cols).reshape(f, c, kh, kw) if needs[1] else None
        gx = None
        if needs[0]:
            dcols = (g2 @ w2).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for u in range(kh):
                for v in range(kw):
                    dxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += \
                        dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            gx = dxp if padding == 0 else np.ascontiguousarray(
                dxp[:, :, padding:padding + h, padding:padding + w])
        return gx, gk

    return _apply("conv2d", (x, kernel), out, fn)


def max_pool2d(x, window, stride):
    """Windowed maxima over the spatial axes of an (n,c,h,w) tensor.

    The backward rule routes the gradient to the argmax position; ties go
    to the lowest flat index within the window.
    """
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"max_pool2d expects a 4-D input, got {xd.shape}")
    n, c, h, w = xd.shape
    if window < 1 or stride < 1:
        raise ValueError(f"max_pool2d bad window/stride: {window}, {stride}")
    if window > h or window > w:
        raise ShapeError(f"max_pool2d window {window} larger than input {xd.shape}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1

    win = sliding_window_view(xd, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = np.ascontiguousarray(win).reshape(n, c, ho, wo, window * window)
    am = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]

    def fn(g, needs):
        ni, ci, hi, wi = np.indices((n, c, ho, wo), sparse=False)
        rows = hi * stride + am // window
        cols = wi * stride + am % window
        gx = np.zeros_like(xd, dtype=g.dtype)
        np.add.at(gx, (ni, ci, rows, cols), g)
        return (gx,)

    return _apply("max_pool2d", (x,), out, fn)


def softmax(logits):
    """Row-wise softmax of an (n,k) tensor, stabilized by max subtraction."""
    xd = logits.data
    if xd.ndim != 2 or xd.shape[1] < 2:
        raise ShapeError(f"softmax expects an (n,k>=2) input, got {xd.shape}")
    z = xd - xd.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def fn(g, needs):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _apply("softmax", (logits,), p, fn)


def cross_entropy(probs, labels):
    """Mean negative log probability of the true class.

    ``probs`` is (n,k) with rows on the simplex; ``labels`` is an int array
    of length n.  Probabilities are clamped to ``PROB_FLOOR`` before the
    log so a confidently wrong row cannot produce an infinite loss.
    """
    pd = probs.data
    labels = np.asarray(labels)
    if pd.ndim != 2 or labels.shape != (pd.shape[0],):
        raise ShapeError(
            f"cross_entropy shape mismatch: probs {pd.shape}, labels {labels.shape}")
    k = pd.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise ValueError(f"label {bad} out of range [0, {k})")
    n = pd.shape[0]
    rows = np.arange(n)
    picked = pd[rows, labels]
    clamped = np.maximum(picked, pd.dtype.type(PROB_FLOOR))
    loss = -np.log(clamped).mean()

    def fn(g, needs):
        gp = np.zeros_like(pd)
        live = picked >= PROB_FLOOR
        gp[rows[live], labels[live]] = -g / (n * clamped[live])
        return (gp,)

    return _apply("cross_entropy", (probs,), loss, fn)
