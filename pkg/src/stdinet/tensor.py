"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation records a node on an explicit :class:`Tape`
owned by one training context; there is no global graph.  Two precisions are
supported: ``STANDARD`` (float32) for training and ``VERIFICATION`` (float64)
for gradient checking, where forward results are also required to be
bit-reproducible against naive reference loops.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError, UsageError

STANDARD = np.float32
VERIFICATION = np.float64

PRECISIONS = {"standard": STANDARD, "verification": VERIFICATION}

# Only configuration the convolution supports: 3x3 kernels, stride 1,
# zero padding 1, so spatial dims are preserved.
CONV_KSIZE = 3
CONV_PAD = 1


def resolve_dtype(precision):
    """Map a precision name or dtype to the numpy dtype used for tensors."""
    if isinstance(precision, str):
        try:
            return PRECISIONS[precision]
        except KeyError:
            raise UsageError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}")
    if precision in (np.float32, np.float64):
        return precision
    raise UsageError(f"unsupported dtype {precision!r}")


class Tensor:
    """An n-dimensional float array, optionally tracked for gradients.

    ``grad`` is populated (same shape as ``data``) once a backward pass has
    run through this tensor.  ``tape`` links the tensor to the recording
    context; constants carry ``tape=None`` and ops inherit the tape from
    whichever operand has one.
    """

    def __init__(self, data, requires_grad=False, tape=None, dtype=None):
        if isinstance(data, Tensor):
            raise UsageError("wrap raw array data, not another Tensor")
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else STANDARD
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape = tape
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """A constant copy sharing no graph history."""
        return Tensor(self.data.copy(), requires_grad=False, tape=None)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Convenience operators used by tests and demo scripts.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return hadamard(self, other)


@dataclass
class TapeNode:
    """One recorded op: kind, operand refs, output ref and its backward rule.

    ``backward`` maps the output gradient to one gradient per input (``None``
    for inputs that need no gradient).
    """

    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of ops for one training context.

    Nodes are appended in execution order, which is already a topological
    order, so the backward pass is a single reverse sweep.  A tape can be
    consumed by exactly one backward(); reset() clears it for reuse.
    """

    def __init__(self):
        self.nodes = []
        self.recording = True
        self._consumed = False

    def __len__(self):
        return len(self.nodes)

    @contextlib.contextmanager
    def paused(self):
        """Temporarily stop recording (evaluation, finite differencing)."""
        prev = self.recording
        self.recording = False
        try:
            yield self
        finally:
            self.recording = prev

    def reset(self):
        self.nodes.clear()
        self._consumed = False

    def backward(self, loss):
        """Populate ``grad`` on every tensor that influenced a scalar loss.

        Gradients accumulate by summation when a tensor feeds several nodes.
        Calling backward twice without reset() is rejected.
        """
        if self._consumed:
            raise UsageError("tape already consumed by backward(); call reset() first")
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if loss.tape is not self or loss._node is None:
            raise UsageError("loss is not recorded on this tape")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            gout = node.output.grad
            if gout is None:
                continue
            grads = node.backward(gout)
            for tensor, g in zip(node.inputs, grads):
                if g is None or not tensor.requires_grad:
                    continue
                if g.shape != tensor.data.shape:
                    raise ShapeError(
                        f"backward rule for {node.op} produced gradient shape "
                        f"{g.shape} for input shape {tensor.data.shape}"
                    )
                if tensor.grad is None:
                    tensor.grad = g.copy()
                else:
                    tensor.grad = tensor.grad + g


def _common_tape(tensors):
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise UsageError("operands belong to different tapes")
    return tape


def _common_dtype(tensors, op):
    dtype = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dtype:
            raise UsageError(f"{op}: mixed precisions {dtype} and {t.data.dtype}")
    return dtype


def _record(op, inputs, out_data, backward):
    tape = _common_tape(inputs)
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires, tape=tape, dtype=out_data.dtype)
    if tape is not None and tape.recording and requires:
        node = TapeNode(op, tuple(inputs), out, backward)
        tape.nodes.append(node)
        out._node = node
    return out


def _check_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    _check_same_shape("add", a, b)
    _common_dtype((a, b), "add")
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b):
    _check_same_shape("sub", a, b)
    _common_dtype((a, b), "sub")
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def hadamard(a, b):
    """Pointwise product of same-shape tensors."""
    _check_same_shape("hadamard", a, b)
    _common_dtype((a, b), "hadamard")
    ad, bd = a.data, b.data
    return _record("hadamard", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def smul(a, scalar):
    """Multiply by a python scalar (constant, not differentiated)."""
    c = a.data.dtype.type(scalar)
    return _record("smul", (a,), a.data * c, lambda g: (g * c,))


def relu(x):
    mask = x.data > 0  # subgradient 0 at the kink
    return _record("relu", (x,), np.where(mask, x.data, x.data.dtype.type(0)), lambda g: (g * mask,))


def leaky_relu(x, slope=0.01):
    s = x.data.dtype.type(slope)
    pos = x.data >= 0
    out = np.where(pos, x.data, s * x.data)
    return _record("leaky_relu", (x,), out, lambda g: (g * np.where(pos, x.data.dtype.type(1), s),))


def sigmoid(x):
    # Split by sign so exp never overflows.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _record("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def tanh(x):
    out = np.tanh(x.data)
    return _record("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


ELEMENTWISE_UNARY = {"relu": relu, "leaky_relu": leaky_relu, "sigmoid": sigmoid, "tanh": tanh}
ELEMENTWISE_BINARY = {"add": add, "sub": sub, "hadamard": hadamard}


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix product of 2-d tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} x {b.data.shape}")
    _common_dtype((a, b), "matmul")
    ad, bd = a.data, b.data
    return _record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d tensor, got {a.data.shape}")
    return _record("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def affine(x, w, b):
    """``x @ w.T + b`` for a vector or a batch of row vectors.

    ``w`` is (out, in), ``b`` is (out,).  A 1-d ``x`` of length `in` yields a
    1-d output; a 2-d ``x`` of shape (batch, in) yields (batch, out) with the
    bias broadcast over rows.
    """
    if w.data.ndim != 2 or b.data.ndim != 1 or w.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"affine: weight {w.data.shape} and bias {b.data.shape} inconsistent")
    if x.data.ndim not in (1, 2) or x.data.shape[-1] != w.data.shape[1]:
        raise ShapeError(f"affine: input {x.data.shape} does not match weight {w.data.shape}")
    _common_dtype((x, w, b), "affine")
    xd, wd = x.data, w.data
    out = xd @ wd.T + b.data

    if xd.ndim == 1:
        def backward(g):
            return g @ wd, np.outer(g, xd), g
    else:
        def backward(g):
            return g @ wd, g.T @ xd, g.sum(axis=0)

    return _record("affine", (x, w, b), out, backward)


def scale_rows(m, w):
    """Multiply row r of a 2-d tensor by w[r]; equals diag(w) @ m."""
    if m.data.ndim != 2 or w.data.ndim != 1 or m.data.shape[0] != w.data.shape[0]:
        raise ShapeError(f"scale_rows: got matrix {m.data.shape}, weights {w.data.shape}")
    _common_dtype((m, w), "scale_rows")
    md, wd = m.data, w.data
    return _record(
        "scale_rows",
        (m, w),
        md * wd[:, None],
        lambda g: (g * wd[:, None], (g * md).sum(axis=1)),
    )


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.data.shape} as {shape}")
    old = x.data.shape
    return _record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def flatten(x):
    return reshape(x, (x.data.size,))


def concat(parts):
    """Concatenate 1-d tensors into one vector."""
    parts = tuple(parts)
    for p in parts:
        if p.data.ndim != 1:
            raise ShapeError(f"concat: expected 1-d parts, got {p.data.shape}")
    _common_dtype(parts, "concat")
    sizes = [p.data.size for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _record("concat", parts, np.concatenate([p.data for p in parts]), backward)


def hconcat(parts):
    """Concatenate 2-d tensors with equal row counts along columns."""
    parts = tuple(parts)
    rows = parts[0].data.shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[0] != rows:
            raise ShapeError(f"hconcat: expected 2-d parts with {rows} rows, got {p.data.shape}")
    _common_dtype(parts, "hconcat")
    widths = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _record("hconcat", parts, np.concatenate([p.data for p in parts], axis=1), backward)


def stack(parts):
    """Stack equal-shape tensors along a new leading axis."""
    parts = tuple(parts)
    if not parts:
        raise UsageError("stack: need at least one tensor")
    shape = parts[0].data.shape
    for p in parts:
        if p.data.shape != shape:
            raise ShapeError(f"stack: mixed shapes {shape} and {p.data.shape}")
    _common_dtype(parts, "stack")
    return _record(
        "stack",
        parts,
        np.stack([p.data for p in parts]),
        lambda g: tuple(g[i] for i in range(len(parts))),
    )


def take(x, index, axis=0):
    """Select one slice along an axis (drops that axis)."""
    index = int(index)
    if not (0 <= index < x.data.shape[axis]):
        raise ShapeError(f"take: index {index} out of range for axis {axis} of {x.data.shape}")
    out = np.take(x.data, index, axis=axis)
    shape = x.data.shape
    sel = (slice(None),) * axis + (index,)

    def backward(g):
        z = np.zeros(shape, dtype=g.dtype)
        z[sel] = g
        return (z,)

    return _record("take", (x,), out.copy(), backward)


def take_rows(x, indices):
    """Gather rows of a 2-d tensor; repeated indices accumulate gradient."""
    if x.data.ndim != 2:
        raise ShapeError(f"take_rows: expected 2-d tensor, got {x.data.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or (idx < 0).any() or (idx >= x.data.shape[0]).any():
        raise ShapeError(f"take_rows: bad indices for table of {x.data.shape[0]} rows")
    shape = x.data.shape

    def backward(g):
        z = np.zeros(shape, dtype=g.dtype)
        np.add.at(z, idx, g)
        return (z,)

    return _record("take_rows", (x,), x.data[idx], backward)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x):
    shape = x.data.shape
    return _record("sum", (x,), np.asarray(x.data.sum(), dtype=x.data.dtype),
                   lambda g: (np.broadcast_to(g, shape).astype(g.dtype, copy=True),))


def mean_all(x):
    shape = x.data.shape
    n = x.data.dtype.type(x.data.size)
    return _record("mean", (x,), np.asarray(x.data.mean(), dtype=x.data.dtype),
                   lambda g: (np.broadcast_to(g / n, shape).astype(g.dtype, copy=True),))


# ---------------------------------------------------------------------------
# convolution


def _conv_check(x, kernels, bias):
    if kernels.data.ndim != 4 or kernels.data.shape[2:] != (CONV_KSIZE, CONV_KSIZE):
        raise ShapeError(f"conv2d: kernels must be (C_out, C_in, 3, 3), got {kernels.data.shape}")
    if bias.data.ndim != 1 or bias.data.shape[0] != kernels.data.shape[0]:
        raise ShapeError(f"conv2d: bias {bias.data.shape} does not match kernels {kernels.data.shape}")
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be (C, H, W) or (B, C, H, W), got {x.data.shape}")
    cin = x.data.shape[-3]
    if cin != kernels.data.shape[1]:
        raise ShapeError(
            f"conv2d: input has {cin} channels but kernels expect {kernels.data.shape[1]} "
            f"(input {x.data.shape}, kernels {kernels.data.shape})"
        )
    if x.data.shape[-2] < 1 or x.data.shape[-1] < 1:
        raise ShapeError(f"conv2d: empty spatial dims in {x.data.shape}")


def _conv_forward_canonical(xp, k, b):
    """Accumulate products in (c, dy, dx) order, one add per term.

    This reproduces the naive quintuple loop bit for bit, which is the
    contract in verification (float64) mode.
    """
    bsz, cin, hp, wp = xp.shape
    h, w = hp - 2, wp - 2
    cout = k.shape[0]
    out = np.empty((bsz, cout, h, w), dtype=xp.dtype)
    out[...] = b[None, :, None, None]
    for c in range(cin):
        for dy in range(CONV_KSIZE):
            for dx in range(CONV_KSIZE):
                patch = xp[:, c, dy:dy + h, dx:dx + w]
                out += patch[:, None] * k[None, :, c, dy, dx, None, None]
    return out


def _conv_forward_fast(xp, k, b):
    bsz, cin, hp, wp = xp.shape
    h, w = hp - 2, wp - 2
    cout = k.shape[0]
    out = np.broadcast_to(b[None, :, None, None], (bsz, cout, h, w)).astype(xp.dtype, copy=True)
    for dy in range(CONV_KSIZE):
        for dx in range(CONV_KSIZE):
            patch = xp[:, :, dy:dy + h, dx:dx + w]
            # (B, H, W, C) @ (C, O) contracted via BLAS
            out += np.tensordot(patch, k[:, :, dy, dx], axes=([1], [1])).transpose(0, 3, 1, 2)
    return out


def conv2d(x, kernels, bias):
    """3x3 / stride-1 / pad-1 convolution; spatial dims are preserved.

    Input may be a single (C_in, H, W) map or a batch (B, C_in, H, W);
    kernels are (C_out, C_in, 3, 3) and bias (C_out,).
    """
    _conv_check(x, kernels, bias)
    _common_dtype((x, kernels, bias), "conv2d")
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    kd, bd = kernels.data, bias.data
    bsz, cin, h, w = xd.shape
    xp = np.zeros((bsz, cin, h + 2 * CONV_PAD, w + 2 * CONV_PAD), dtype=xd.dtype)
    xp[:, :, CONV_PAD:CONV_PAD + h, CONV_PAD:CONV_PAD + w] = xd

    if xd.dtype == VERIFICATION:
        out = _conv_forward_canonical(xp, kd, bd)
    else:
        out = _conv_forward_fast(xp, kd, bd)

    def backward(g):
        gb = g[None] if single else g
        dk = np.zeros_like(kd)
        dxp = np.zeros_like(xp)
        for dy in range(CONV_KSIZE):
            for dx in range(CONV_KSIZE):
                patch = xp[:, :, dy:dy + h, dx:dx + w]
                dk[:, :, dy, dx] = np.tensordot(gb, patch, axes=([0, 2, 3], [0, 2, 3]))
                dxp[:, :, dy:dy + h, dx:dx + w] += np.tensordot(
                    gb, kd[:, :, dy, dx], axes=([1], [0])
                ).transpose(0, 3, 1, 2)
        dx_ = dxp[:, :, CONV_PAD:CONV_PAD + h, CONV_PAD:CONV_PAD + w]
        db = gb.sum(axis=(0, 2, 3))
        return (dx_[0] if single else dx_, dk, db)

    return _record("conv2d", (x, kernels, bias), out[0] if single else out, backward)


# ---------------------------------------------------------------------------
# batch normalization


class BnState:
    """Running statistics for one batchnorm layer (per-channel)."""

    def __init__(self, channels, dtype=STANDARD, eps=1e-5, momentum=0.1):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    def copy(self):
        dup = BnState(len(self.running_mean), dtype=self.running_mean.dtype,
                      eps=self.eps, momentum=self.momentum)
        dup.running_mean[:] = self.running_mean
        dup.running_var[:] = self.running_var
        return dup


def batchnorm(x, gamma, beta, state, mode):
    """Per-channel batch normalization over a (B, C, H, W) tensor.

    Train mode normalizes by batch statistics (needs B >= 2) and updates the
    running stats with momentum; eval mode normalizes by the running stats.
    A 3-d (C, H, W) input is treated as a batch of one, which only eval mode
    accepts.
    """
    if mode not in ("train", "eval"):
        raise UsageError(f"batchnorm: mode must be 'train' or 'eval', got {mode!r}")
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"batchnorm: expected (B, C, H, W) or (C, H, W), got {x.data.shape}")
    single = x.data.ndim == 3
    bsz, ch = (1, x.data.shape[0]) if single else (x.data.shape[0], x.data.shape[1])
    if gamma.data.shape != (ch,) or beta.data.shape != (ch,):
        raise ShapeError(f"batchnorm: gamma/beta must be ({ch},), got {gamma.data.shape}/{beta.data.shape}")
    if mode == "train" and bsz < 2:
        raise UsageError(f"batchnorm: train mode needs a batch of at least 2, got {bsz}")
    _common_dtype((x, gamma, beta), "batchnorm")

    xd = x.data[None] if single else x.data
    gd, bd = gamma.data, beta.data
    eps = xd.dtype.type(state.eps)
    n = xd.shape[0] * xd.shape[2] * xd.shape[3]

    if mode == "train":
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))  # biased, used for normalization
        m = state.momentum
        unbiased = var * (n / (n - 1))
        state.running_mean[:] = (1 - m) * state.running_mean + m * mean
        state.running_var[:] = (1 - m) * state.running_var + m * unbiased
    else:
        mean = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gd[None, :, None, None] * xhat + bd[None, :, None, None]
    if single:
        out = out[0]

    if mode == "train":
        def backward(g):
            gb = g[None] if single else g
            dgamma = (gb * xhat).sum(axis=(0, 2, 3))
            dbeta = gb.sum(axis=(0, 2, 3))
            dxhat = gb * gd[None, :, None, None]
            # Differentiate through the batch mean and variance.
            s1 = dxhat.sum(axis=(0, 2, 3))
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3))
            dx = (inv_std[None, :, None, None] / n) * (
                n * dxhat - s1[None, :, None, None] - xhat * s2[None, :, None, None]
            )
            return dx[0] if single else dx, dgamma, dbeta
    else:
        def backward(g):
            gb = g[None] if single else g
            dgamma = (gb * xhat).sum(axis=(0, 2, 3))
            dbeta = gb.sum(axis=(0, 2, 3))
            dx = gb * (gd * inv_std)[None, :, None, None]
            return dx[0] if single else dx, dgamma, dbeta

    return _record("batchnorm", (x, gamma, beta), out, backward)


# ---------------------------------------------------------------------------
# gradient verification


def finite_diff_check(f, x, eps=1e-5):
    """Max relative error between tape gradients and central differences.

    ``f`` maps ``x`` to a scalar tensor and must be re-evaluable.  Runs only
    in verification (float64) precision.  The error per coordinate is
    |analytic - numeric| / max(1, |numeric|); the max over coordinates is
    returned (NaN anywhere makes the result NaN, i.e. a failure).
    """
    if x.data.dtype != VERIFICATION:
        raise UsageError("finite_diff_check requires verification (float64) precision")
    if not x.requires_grad:
        raise UsageError("finite_diff_check target must have requires_grad=True")

    x.grad = None
    loss = f(x)
    tape = loss.tape
    if tape is None:
        raise UsageError("f(x) recorded nothing; no tape reachable from the output")
    tape.backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    tape.reset()

    numeric = np.zeros_like(x.data)
    with tape.paused():
        for idx in np.ndindex(x.data.shape):
            orig = x.data[idx]
            x.data[idx] = orig + eps
            fp = f(x).item()
            x.data[idx] = orig - eps
            fm = f(x).item()
            x.data[idx] = orig
            numeric[idx] = (fp - fm) / (2.0 * eps)

    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(np.max(err))
