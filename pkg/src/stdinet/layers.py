"""Parameterized layers built from tensor ops.

Initialization conventions, pinned for reproducibility: convolution kernels
are He-normal with std sqrt(2/fan_in); linear and LSTM weights are uniform
in +-1/sqrt(fan_in); all biases start at zero; batchnorm starts at gamma=1,
beta=0.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError, UsageError
from .tensor import BnState, Tensor

LSTM_GATES = ("i", "f", "g", "o")


def he_normal(rng, shape, fan_in, dtype):
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype), requires_grad=True)


def uniform_fan_in(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class LinearLayer:
    """weight (out, in) and bias (out,); forward is weight @ x + bias."""

    def __init__(self, in_dim, out_dim, rng, dtype=T.STANDARD):
        self.weight = uniform_fan_in(rng, (out_dim, in_dim), in_dim, dtype)
        self.bias = zeros_param(out_dim, dtype)

    def forward(self, x):
        return T.affine(x, self.weight, self.bias)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]


class BatchNorm:
    """Per-channel batchnorm parameters plus running statistics."""

    def __init__(self, channels, dtype=T.STANDARD):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = zeros_param(channels, dtype)
        self.state = BnState(channels, dtype=dtype)

    def forward(self, x, mode):
        return T.batchnorm(x, self.gamma, self.beta, self.state, mode)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


class Conv3x3:
    """One 3x3 convolution layer with bias."""

    def __init__(self, in_channels, out_channels, rng, dtype=T.STANDARD):
        fan_in = in_channels * 9
        self.kernels = he_normal(rng, (out_channels, in_channels, 3, 3), fan_in, dtype)
        self.bias = zeros_param(out_channels, dtype)

    def forward(self, x):
        return T.conv2d(x, self.kernels, self.bias)

    def params(self):
        return [("kernels", self.kernels), ("bias", self.bias)]


class ResUnit:
    """Two conv+BN layers whose outputs are summed and passed through ReLU.

    The residual sum is X1 + X2 where X1 is the first conv's (normalized)
    output and X2 the second's, i.e. the skip taps the first conv output,
    not the unit input.  ``standard_skip=True`` switches to the conventional
    identity-skip form relu(X0 + BN(conv2(relu(BN(conv1(X0)))))) for
    comparison runs; it is off by default.
    """

    def __init__(self, channels, rng, dtype=T.STANDARD, standard_skip=False):
        self.conv1 = Conv3x3(channels, channels, rng, dtype)
        self.bn1 = BatchNorm(channels, dtype)
        self.conv2 = Conv3x3(channels, channels, rng, dtype)
        self.bn2 = BatchNorm(channels, dtype)
        self.standard_skip = standard_skip

    def forward(self, x, mode):
        if self.standard_skip:
            x1 = T.relu(self.bn1.forward(self.conv1.forward(x), mode))
            x2 = self.bn2.forward(self.conv2.forward(x1), mode)
            return T.relu(T.add(x, x2))
        x1 = self.bn1.forward(self.conv1.forward(x), mode)
        x2 = self.bn2.forward(self.conv2.forward(x1), mode)
        return T.relu(T.add(x1, x2))

    def params(self):
        out = []
        for prefix, part in (("conv1", self.conv1), ("bn1", self.bn1),
                             ("conv2", self.conv2), ("bn2", self.bn2)):
            out.extend((f"{prefix}.{n}", p) for n, p in part.params())
        return out

    def states(self):
        return [("bn1", self.bn1.state), ("bn2", self.bn2.state)]


class ConvBlock:
    """Entry conv (2 -> c channels, ReLU, no BN) followed by two ResUnits."""

    def __init__(self, channels, rng, dtype=T.STANDARD, in_channels=2, n_resunits=2):
        self.entry = Conv3x3(in_channels, channels, rng, dtype)
        self.resunits = [ResUnit(channels, rng, dtype) for _ in range(n_resunits)]
        self.in_channels = in_channels

    def forward(self, m, mode):
        if m.data.shape[-3] != self.in_channels:
            raise ShapeError(
                f"conv block expects {self.in_channels} input channels, got shape {m.data.shape}"
            )
        h = T.relu(self.entry.forward(m))
        for unit in self.resunits:
            h = unit.forward(h, mode)
        return h

    def params(self):
        out = [(f"entry.{n}", p) for n, p in self.entry.params()]
        for i, unit in enumerate(self.resunits):
            out.extend((f"res{i}.{n}", p) for n, p in unit.params())
        return out

    def states(self):
        out = []
        for i, unit in enumerate(self.resunits):
            out.extend((f"res{i}.{n}", s) for n, s in unit.states())
        return out


class LstmParams:
    """Per-gate LSTM parameters: W_i* (d, in), W_h* (d, d) and their biases."""

    def __init__(self, input_dim, hidden_dim, rng, dtype=T.STANDARD):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.w_ix = {}
        self.b_ix = {}
        self.w_hx = {}
        self.b_hx = {}
        for gate in LSTM_GATES:
            self.w_ix[gate] = uniform_fan_in(rng, (hidden_dim, input_dim), input_dim, dtype)
            self.b_ix[gate] = zeros_param(hidden_dim, dtype)
            self.w_hx[gate] = uniform_fan_in(rng, (hidden_dim, hidden_dim), hidden_dim, dtype)
            self.b_hx[gate] = zeros_param(hidden_dim, dtype)

    def params(self):
        out = []
        for gate in LSTM_GATES:
            out.append((f"w_i{gate}", self.w_ix[gate]))
            out.append((f"b_i{gate}", self.b_ix[gate]))
            out.append((f"w_h{gate}", self.w_hx[gate]))
            out.append((f"b_h{gate}", self.b_hx[gate]))
        return out

    def zero_state(self, dtype, batch=None):
        shape = (self.hidden_dim,) if batch is None else (batch, self.hidden_dim)
        z = Tensor(np.zeros(shape, dtype=dtype))
        return z, z


def lstm_step(p, x_t, h_prev, c_prev):
    """One LSTM cell update; returns (h_t, c_t).

    x_t is (input_dim,) or (batch, input_dim); h_prev/c_prev match with the
    hidden dim.  Gates i, f, o use sigmoid, the candidate g uses tanh, then
    c_t = f*c_prev + i*g and h_t = o*tanh(c_t).
    """
    if x_t.data.shape[-1] != p.input_dim:
        raise ShapeError(f"lstm_step: input dim {x_t.data.shape} vs expected {p.input_dim}")
    if h_prev.data.shape != c_prev.data.shape or h_prev.data.shape[-1] != p.hidden_dim:
        raise ShapeError(f"lstm_step: state shapes {h_prev.data.shape}/{c_prev.data.shape}")

    def gate(name, activation):
        pre = T.add(
            T.affine(x_t, p.w_ix[name], p.b_ix[name]),
            T.affine(h_prev, p.w_hx[name], p.b_hx[name]),
        )
        return activation(pre)

    i_t = gate("i", T.sigmoid)
    f_t = gate("f", T.sigmoid)
    g_t = gate("g", T.tanh)
    o_t = gate("o", T.sigmoid)
    c_t = T.add(T.hadamard(f_t, c_prev), T.hadamard(i_t, g_t))
    h_t = T.hadamard(o_t, T.tanh(c_t))
    return h_t, c_t


def lstm_sequence(p, xs):
    """Fold lstm_step over the rows of a (L, input_dim) tensor; return h_L."""
    if xs.data.ndim != 2:
        raise ShapeError(f"lstm_sequence: expected (L, input) tensor, got {xs.data.shape}")
    length = xs.data.shape[0]
    if length < 1:
        raise UsageError("lstm_sequence: empty sequence")
    h, c = p.zero_state(xs.data.dtype)
    for l in range(length):
        h, c = lstm_step(p, T.take(xs, l), h, c)
    return h


def lstm_sequence_batch(p, xs):
    """Fold lstm_step over a list of L tensors of shape (batch, input_dim)."""
    if not xs:
        raise UsageError("lstm_sequence_batch: empty sequence")
    batch = xs[0].data.shape[0]
    h, c = p.zero_state(xs[0].data.dtype, batch=batch)
    for x_t in xs:
        h, c = lstm_step(p, x_t, h, c)
    return h


def linear_forward(layer, x):
    return layer.forward(x)
