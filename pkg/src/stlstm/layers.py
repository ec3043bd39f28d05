"""Differentiable layers: ConvLSTM, batch normalization, dense, LeakyReLU, dropout.

Two surfaces live here. The functional entry points (`conv_lstm_step`,
`batch_norm_train`, `leaky_relu`, ...) use the per-sample channels-first
layouts of the public API. The layer classes batch over samples and keep
activations channels-last internally, which lets every convolution run as a
single im2col + GEMM; they carry `params`/`grads` dicts for the optimizer
and cache whatever backward needs.

ConvLSTM gate equations (peephole variant, all convolutions same-padding
stride 1):

    i = sigmoid(Wxi*x + Whi*h + Wci o c_prev + bi)
    f = sigmoid(Wxf*x + Whf*h + Wcf o c_prev + bf)
    g = tanh   (Wxc*x + Whc*h + bc)
    c = f o c_prev + i o g          # "standard"; see cell_rule below
    o = sigmoid(Wxo*x + Who*h + Wco o c + bo)
    h = o o tanh(c)

`cell_rule="no-prev-cell"` switches the cell update to c = f + i o g, a
non-forgetting variant kept selectable for comparison experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, UsageError
from .tensor import (
    ConvSpec,
    col2im2d,
    im2col2d,
    im2col3d,
    col2im3d,
    kernels_to_matrix,
    matrix_to_kernels,
    sigmoid,
)

CELL_RULES = ("standard", "no-prev-cell")


def uniform_init(rng, shape, fan_in, dtype=np.float32):
    """U(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization."""
    bound = 1.0 / np.sqrt(fan_in)
    return ((rng.random(shape) * 2.0 - 1.0) * bound).astype(dtype)


# ---------------------------------------------------------------------------
# ConvLSTM
# ---------------------------------------------------------------------------

@dataclass
class ConvLstmParams:
    """Gate weights of one ConvLSTM layer.

    Input kernels w_x? are (F, Cin, k, k), recurrent kernels w_h? are
    (F, F, k, k), peepholes w_ci/w_cf/w_co are (F, H, W) for a fixed input
    resolution, biases are (F,).
    """

    w_xi: np.ndarray
    w_hi: np.ndarray
    w_ci: np.ndarray
    b_i: np.ndarray
    w_xf: np.ndarray
    w_hf: np.ndarray
    w_cf: np.ndarray
    b_f: np.ndarray
    w_xc: np.ndarray
    w_hc: np.ndarray
    b_c: np.ndarray
    w_xo: np.ndarray
    w_ho: np.ndarray
    w_co: np.ndarray
    b_o: np.ndarray

    FIELDS = ("w_xi", "w_hi", "w_ci", "b_i", "w_xf", "w_hf", "w_cf", "b_f",
              "w_xc", "w_hc", "b_c", "w_xo", "w_ho", "w_co", "b_o")

    @classmethod
    def init(cls, in_channels, filters, height, width, kernel=3, rng=None, dtype=np.float32):
        """Fresh parameters: uniform 1/sqrt(fan_in) kernels, zero peepholes,
        zero biases except forget bias = 1 (keeps early gradients alive)."""
        rng = rng or np.random.default_rng()
        f, k = filters, kernel
        fan_x, fan_h = in_channels * k * k, filters * k * k
        kx = lambda: uniform_init(rng, (f, in_channels, k, k), fan_x, dtype)
        kh = lambda: uniform_init(rng, (f, f, k, k), fan_h, dtype)
        peep = lambda: np.zeros((f, height, width), dtype)
        bias = lambda v=0.0: np.full((f,), v, dtype)
        return cls(
            w_xi=kx(), w_hi=kh(), w_ci=peep(), b_i=bias(),
            w_xf=kx(), w_hf=kh(), w_cf=peep(), b_f=bias(1.0),
            w_xc=kx(), w_hc=kh(), b_c=bias(),
            w_xo=kx(), w_ho=kh(), w_co=peep(), b_o=bias(),
        )

    @property
    def filters(self):
        return self.w_xi.shape[0]

    @property
    def in_channels(self):
        return self.w_xi.shape[1]

    @property
    def kernel(self):
        return self.w_xi.shape[2]

    @property
    def state_shape(self):
        return (self.filters,) + self.w_ci.shape[1:]

    def named_arrays(self):
        return [(name, getattr(self, name)) for name in self.FIELDS]


@dataclass
class ConvLstmState:
    """Recurrent state: cell c and hidden output h, both (F, H, W)."""

    c: np.ndarray
    h: np.ndarray

    @classmethod
    def zeros(cls, params, dtype=None):
        dtype = dtype or params.w_xi.dtype
        shape = params.state_shape
        return cls(c=np.zeros(shape, dtype), h=np.zeros(shape, dtype))


def _gate_matrix(p):
    """Stack all gate kernels into one GEMM weight matrix.

    Rows follow im2col column order (kernel offset major, then concatenated
    [x, h] channel); columns are the four gates' filters in order i,f,g,o.
    Returns (wmat ((Cin+F)*k*k, 4F), bias4 (4F,))."""
    def block(wx, wh):
        cat = np.concatenate([wx, wh], axis=1)          # (F, Cin+F, k, k)
        return kernels_to_matrix(cat)                   # (k*k*(Cin+F), F)

    wmat = np.concatenate(
        [block(p.w_xi, p.w_hi), block(p.w_xf, p.w_hf),
         block(p.w_xc, p.w_hc), block(p.w_xo, p.w_ho)], axis=1)
    bias4 = np.concatenate([p.b_i, p.b_f, p.b_c, p.b_o])
    return np.ascontiguousarray(wmat), bias4


def _split_gate_matrix(dwmat, dbias4, p):
    """Inverse of _gate_matrix for gradients; returns dict field -> grad."""
    f, cin, k = p.filters, p.in_channels, p.kernel
    out = {}
    for gi, (xn, hn, bn) in enumerate(
        [("w_xi", "w_hi", "b_i"), ("w_xf", "w_hf", "b_f"),
         ("w_xc", "w_hc", "b_c"), ("w_xo", "w_ho", "b_o")]):
        dcat = matrix_to_kernels(dwmat[:, gi * f:(gi + 1) * f], (f, cin + f, k, k))
        out[xn] = dcat[:, :cin]
        out[hn] = np.ascontiguousarray(dcat[:, cin:])
        out[bn] = dbias4[gi * f:(gi + 1) * f]
    return out


def _lstm_step_core(x_nl, c, h, p, wmat, bias4, spec, cell_rule):
    """One batched step. x_nl (B,H,W,Cin); c,h (B,H,W,F) channels-last.

    Returns (cols, i, f, g, o, tc, c_next, h_next); cols is the im2col
    matrix of the concatenated [x, h_prev] input, kept for backward."""
    b, hh, ww, _ = x_nl.shape
    f_ = p.filters
    xh = np.concatenate([x_nl, h], axis=-1)
    cols, _ = im2col2d(xh, spec)
    a = (cols @ wmat + bias4).reshape(b, hh, ww, 4 * f_)
    pi = p.w_ci.transpose(1, 2, 0)
    pf = p.w_cf.transpose(1, 2, 0)
    po = p.w_co.transpose(1, 2, 0)
    i = sigmoid(a[..., :f_] + pi * c)
    f = sigmoid(a[..., f_:2 * f_] + pf * c)
    g = np.tanh(a[..., 2 * f_:3 * f_])
    if cell_rule == "standard":
        c_next = f * c + i * g
    else:
        c_next = f + i * g
    o = sigmoid(a[..., 3 * f_:] + po * c_next)
    tc = np.tanh(c_next)
    h_next = o * tc
    return cols, i, f, g, o, tc, c_next, h_next


def _check_state(prev, p):
    shape = p.state_shape
    if prev.c.shape != shape or prev.h.shape != shape:
        raise DimensionError(
            f"state shape: expected {shape}, got c {prev.c.shape} / h {prev.h.shape}"
        )


def conv_lstm_step(x, prev, params, cell_rule="standard"):
    """One ConvLSTM step on a single frame x (Cin,H,W) from state `prev`.

    Returns (out, next_state) where out is next_state.h, shape (F,H,W)."""
    if cell_rule not in CELL_RULES:
        raise ConfigurationError(f"cell_rule must be one of {CELL_RULES}")
    _check_state(prev, params)
    f, hh, ww = params.state_shape
    if x.shape != (params.in_channels, hh, ww):
        raise DimensionError(
            f"input shape: expected {(params.in_channels, hh, ww)}, got {x.shape}"
        )
    spec = ConvSpec.make(params.in_channels + f, 4 * f, params.kernel)
    wmat, bias4 = _gate_matrix(params)
    x_nl = np.ascontiguousarray(x.transpose(1, 2, 0))[None]
    c = np.ascontiguousarray(prev.c.transpose(1, 2, 0))[None]
    h = np.ascontiguousarray(prev.h.transpose(1, 2, 0))[None]
    *_, c_next, h_next = _lstm_step_core(x_nl, c, h, params, wmat, bias4, spec, cell_rule)
    nxt = ConvLstmState(
        c=np.ascontiguousarray(c_next[0].transpose(2, 0, 1)),
        h=np.ascontiguousarray(h_next[0].transpose(2, 0, 1)),
    )
    return nxt.h, nxt


def conv_lstm_forward_sequence(xs, params, init=None, cell_rule="standard"):
    """Run a (T,Cin,H,W) sequence, returning all hidden outputs (T,F,H,W)."""
    if xs.ndim != 4 or xs.shape[0] < 1:
        raise DimensionError(f"sequence shape: expected (T>=1,Cin,H,W), got {xs.shape}")
    state = init if init is not None else ConvLstmState.zeros(params, xs.dtype)
    outs = []
    for t in range(xs.shape[0]):
        out, state = conv_lstm_step(xs[t], state, params, cell_rule)
        outs.append(out)
    return np.stack(outs)


class ConvLSTMLayer:
    """Batched sequence-in / sequence-out ConvLSTM with BPTT backward."""

    def __init__(self, in_channels, filters, height, width, kernel=3, rng=None,
                 dtype=np.float32, cell_rule="standard"):
        if cell_rule not in CELL_RULES:
            raise ConfigurationError(f"cell_rule must be one of {CELL_RULES}")
        self.p = ConvLstmParams.init(in_channels, filters, height, width, kernel, rng, dtype)
        self.cell_rule = cell_rule
        self.spec = ConvSpec.make(in_channels + filters, 4 * filters, kernel)
        self.params = dict(self.p.named_arrays())
        self.grads = {}
        self._cache = None

    def forward(self, xs, mode="train", rng=None):
        """xs (B,T,H,W,Cin) -> (B,T,H,W,F)."""
        b, t, hh, ww, _ = xs.shape
        f = self.p.filters
        wmat, bias4 = _gate_matrix(self.p)
        c = np.zeros((b, hh, ww, f), xs.dtype)
        h = np.zeros((b, hh, ww, f), xs.dtype)
        steps = []
        hs = np.empty((b, t, hh, ww, f), xs.dtype)
        for ti in range(t):
            c_prev = c
            cols, i, fg, g, o, tc, c, h = _lstm_step_core(
                xs[:, ti], c, h, self.p, wmat, bias4, self.spec, self.cell_rule)
            steps.append((cols, i, fg, g, o, tc, c_prev, c))
            hs[:, ti] = h
        self._cache = (xs.shape, wmat, steps)
        return hs

    def backward(self, dhs):
        """dhs (B,T,H,W,F) -> dxs (B,T,H,W,Cin); fills self.grads."""
        if self._cache is None:
            raise UsageError("backward called without a cached forward pass")
        (b, t, hh, ww, cin), wmat, steps = self._cache
        p = self.p
        f = p.filters
        dt_ = dhs.dtype
        pi = p.w_ci.transpose(1, 2, 0)
        pf = p.w_cf.transpose(1, 2, 0)
        po = p.w_co.transpose(1, 2, 0)
        dwmat = np.zeros_like(wmat)
        dbias4 = np.zeros(4 * f, dt_)
        d_ci = np.zeros((hh, ww, f), dt_)
        d_cf = np.zeros((hh, ww, f), dt_)
        d_co = np.zeros((hh, ww, f), dt_)
        dxs = np.empty((b, t, hh, ww, cin), dt_)
        dc_next = np.zeros((b, hh, ww, f), dt_)
        dh_next = np.zeros((b, hh, ww, f), dt_)
        da = np.empty((b, hh, ww, 4 * f), dt_)
        for ti in reversed(range(t)):
            cols, i, fg, g, o, tc, c_prev, c = steps[ti]
            dh = dhs[:, ti] + dh_next
            do = dh * tc
            dao = do * o * (1.0 - o)
            dc = dh * o * (1.0 - tc * tc) + dc_next + dao * po
            d_co += (dao * c).sum(axis=0)
            di = dc * g
            dg = dc * i
            if self.cell_rule == "standard":
                df = dc * c_prev
                dc_prev = dc * fg
            else:
                df = dc
                dc_prev = np.zeros_like(dc)
            dai = di * i * (1.0 - i)
            daf = df * fg * (1.0 - fg)
            d_ci += (dai * c_prev).sum(axis=0)
            d_cf += (daf * c_prev).sum(axis=0)
            dc_prev += dai * pi + daf * pf
            da[..., :f] = dai
            da[..., f:2 * f] = daf
            da[..., 2 * f:3 * f] = dg * (1.0 - g * g)
            da[..., 3 * f:] = dao
            dam = da.reshape(-1, 4 * f)
            dwmat += cols.T @ dam
            dbias4 += dam.sum(axis=0)
            dxh = col2im2d(dam @ wmat.T, (b, hh, ww, cin + f), self.spec)
            dxs[:, ti] = dxh[..., :cin]
            dh_next = np.ascontiguousarray(dxh[..., cin:])
            dc_next = dc_prev
        self.grads = _split_gate_matrix(dwmat, dbias4, p)
        self.grads["w_ci"] = np.ascontiguousarray(d_ci.transpose(2, 0, 1))
        self.grads["w_cf"] = np.ascontiguousarray(d_cf.transpose(2, 0, 1))
        self.grads["w_co"] = np.ascontiguousarray(d_co.transpose(2, 0, 1))
        self._cache = None
        return dxs


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormParams:
    """Per-channel affine + running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.99
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    batches_seen: int = 0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in (0, 1)")
        if self.running_mean is None:
            self.running_mean = np.zeros_like(self.gamma)
        if self.running_var is None:
            self.running_var = np.ones_like(self.gamma)

    @classmethod
    def init(cls, channels, epsilon=1e-5, momentum=0.99, dtype=np.float32):
        return cls(gamma=np.ones(channels, dtype), beta=np.zeros(channels, dtype),
                   epsilon=epsilon, momentum=momentum)


def _bn_axes(x, channel_axis):
    axis = channel_axis % x.ndim
    return tuple(a for a in range(x.ndim) if a != axis), axis


def _bn_cshape(x, axis):
    return tuple(-1 if a == axis else 1 for a in range(x.ndim))


def batch_norm_train(x, params, channel_axis=1):
    """Normalize per channel over batch + spatial axes, update running stats.

    x has the batch on axis 0 and channels on `channel_axis`; returns y of
    the same shape. Batch statistics use the biased 1/m variance."""
    if x.shape[0] < 2:
        raise ConfigurationError(f"training-mode batch size must be >= 2, got {x.shape[0]}")
    red, axis = _bn_axes(x, channel_axis)
    if x.shape[axis] != params.gamma.shape[0]:
        raise DimensionError(
            f"channel axis: expected {params.gamma.shape[0]} channels, got {x.shape[axis]}")
    mean = x.mean(axis=red)
    var = x.var(axis=red)
    cs = _bn_cshape(x, axis)
    invstd = 1.0 / np.sqrt(var + params.epsilon)
    xhat = (x - mean.reshape(cs)) * invstd.reshape(cs)
    y = params.gamma.reshape(cs) * xhat + params.beta.reshape(cs)
    m = params.momentum
    params.running_mean[...] = m * params.running_mean + (1.0 - m) * mean
    params.running_var[...] = m * params.running_var + (1.0 - m) * var
    params.batches_seen += 1
    return y


def batch_norm_infer(x, params, channel_axis=1):
    """Normalize with running statistics; deterministic and batch-size free."""
    if params.batches_seen < 1:
        raise ConfigurationError("running statistics unpopulated; train on >= 1 batch first")
    red, axis = _bn_axes(x, channel_axis)
    if x.shape[axis] != params.gamma.shape[0]:
        raise DimensionError(
            f"channel axis: expected {params.gamma.shape[0]} channels, got {x.shape[axis]}")
    cs = _bn_cshape(x, axis)
    invstd = 1.0 / np.sqrt(params.running_var + params.epsilon)
    return (params.gamma * invstd).reshape(cs) * (x - params.running_mean.reshape(cs)) \
        + params.beta.reshape(cs)


class BatchNormLayer:
    """Channels-last batch norm over all non-channel axes."""

    def __init__(self, channels, epsilon=1e-5, momentum=0.99, dtype=np.float32):
        self.bn = BatchNormParams.init(channels, epsilon, momentum, dtype)
        self.params = {"gamma": self.bn.gamma, "beta": self.bn.beta}
        self.grads = {}
        self._cache = None

    @property
    def running_stats(self):
        return {"running_mean": self.bn.running_mean, "running_var": self.bn.running_var}

    def forward(self, x, mode="train", rng=None):
        if mode == "train":
            red, _ = _bn_axes(x, -1)
            mean = x.mean(axis=red)
            var = x.var(axis=red)
            invstd = 1.0 / np.sqrt(var + self.bn.epsilon)
            xhat = (x - mean) * invstd
            y = self.bn.gamma * xhat + self.bn.beta
            m = self.bn.momentum
            self.bn.running_mean[...] = m * self.bn.running_mean + (1.0 - m) * mean
            self.bn.running_var[...] = m * self.bn.running_var + (1.0 - m) * var
            self.bn.batches_seen += 1
            self._cache = (xhat, invstd, red)
            return y
        return batch_norm_infer(x, self.bn, channel_axis=-1)

    def backward(self, dy):
        if self._cache is None:
            raise UsageError("backward called without a cached train-mode forward")
        xhat, invstd, red = self._cache
        m = dy.size // dy.shape[-1]
        self.grads["gamma"] = (dy * xhat).sum(axis=red)
        self.grads["beta"] = dy.sum(axis=red)
        dxhat = dy * self.bn.gamma
        dx = invstd * (dxhat - dxhat.mean(axis=red)
                       - xhat * (dxhat * xhat).sum(axis=red) / m)
        self._cache = None
        return dx


# ---------------------------------------------------------------------------
# dense / activations / dropout / flatten
# ---------------------------------------------------------------------------

def dense(x, weights, bias):
    """y = weights @ x + bias for a flat x (N,), weights (M,N), bias (M,)."""
    if weights.shape[1] != x.shape[0] or weights.shape[0] != bias.shape[0]:
        raise DimensionError(
            f"dense shapes: x {x.shape}, weights {weights.shape}, bias {bias.shape}")
    return weights @ x + bias


def leaky_relu(x, slope=0.2):
    """y = x for x >= 0 else slope * x; slope in (0,1)."""
    if not 0.0 < slope < 1.0:
        raise ConfigurationError(f"slope must lie in (0, 1), got {slope}")
    x = np.asarray(x)
    return np.where(x >= 0, x, x * x.dtype.type(slope))


def dropout_train(x, rate, rng):
    """Inverted dropout: keep with probability 1-rate, scale kept values by
    1/(1-rate). Returns (y, mask) where mask is the applied multiplier."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    return x * mask, mask


class DenseLayer:
    """Batched affine map: (B, N) -> (B, M) with weights (M, N)."""

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng()
        self.params = {
            "weights": uniform_init(rng, (out_features, in_features), in_features, dtype),
            "bias": np.zeros(out_features, dtype),
        }
        self.grads = {}
        self._cache = None

    def forward(self, x, mode="train", rng=None):
        self._cache = x
        return x @ self.params["weights"].T + self.params["bias"]

    def backward(self, dy):
        if self._cache is None:
            raise UsageError("backward called without a cached forward pass")
        x = self._cache
        self.grads["weights"] = dy.T @ x
        self.grads["bias"] = dy.sum(axis=0)
        self._cache = None
        return dy @ self.params["weights"]


class LeakyReLULayer:
    def __init__(self, slope=0.2):
        if not 0.0 < slope < 1.0:
            raise ConfigurationError(f"slope must lie in (0, 1), got {slope}")
        self.slope = slope
        self.params = {}
        self.grads = {}
        self._cache = None

    def forward(self, x, mode="train", rng=None):
        self._cache = x >= 0
        return np.where(self._cache, x, x * x.dtype.type(self.slope))

    def backward(self, dy):
        if self._cache is None:
            raise UsageError("backward called without a cached forward pass")
        pos = self._cache
        self._cache = None
        return np.where(pos, dy, dy * dy.dtype.type(self.slope))


class DropoutLayer:
    """Inverted dropout; identity when rate == 0 or at inference."""

    def __init__(self, rate):
        if not 0.0 <= rate < 1.0:
            raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.params = {}
        self.grads = {}
        self._mask = None

    def forward(self, x, mode="train", rng=None):
        if mode != "train" or self.rate == 0.0:
            self._mask = 1.0
            return x
        if rng is None:
            raise ConfigurationError("train-mode dropout needs an rng stream")
        y, self._mask = dropout_train(x, self.rate, rng)
        return y

    def backward(self, dy):
        if self._mask is None:
            raise UsageError("backward called without a cached forward pass")
        mask = self._mask
        self._mask = None
        return dy * mask


class FlattenLayer:
    def __init__(self):
        self.params = {}
        self.grads = {}
        self._shape = None

    def forward(self, x, mode="train", rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        if self._shape is None:
            raise UsageError("backward called without a cached forward pass")
        shape = self._shape
        self._shape = None
        return dy.reshape(shape)


class Conv2DLayer:
    """Batched 2D convolution (B,H,W,Cin) -> (B,Ho,Wo,Cout), same padding."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng()
        self.spec = ConvSpec.make(in_channels, out_channels, kernel, stride, "same")
        fan_in = in_channels * int(np.prod(self.spec.kernel))
        self.params = {
            "kernels": uniform_init(rng, (out_channels, in_channels, *self.spec.kernel), fan_in, dtype),
            "bias": np.zeros(out_channels, dtype),
        }
        self.grads = {}
        self._cache = None

    def forward(self, x, mode="train", rng=None):
        b = x.shape[0]
        cols, (ho, wo) = im2col2d(x, self.spec)
        y = cols @ kernels_to_matrix(self.params["kernels"]) + self.params["bias"]
        self._cache = (cols, x.shape)
        return y.reshape(b, ho, wo, -1)

    def backward(self, dy):
        if self._cache is None:
            raise UsageError("backward called without a cached forward pass")
        cols, in_shape = self._cache
        self._cache = None
        dym = dy.reshape(-1, dy.shape[-1])
        self.grads["kernels"] = matrix_to_kernels(cols.T @ dym, self.params["kernels"].shape)
        self.grads["bias"] = dym.sum(axis=0)
        dcols = dym @ kernels_to_matrix(self.params["kernels"]).T
        return col2im2d(dcols, in_shape, self.spec)


class Conv3DLayer:
    """Batched 3D convolution (B,T,H,W,Cin) -> (B,To,Ho,Wo,Cout).

    The temporal axis is valid-padded (a kT-deep kernel collapses T == kT
    to To == 1); spatial axes are same-padded."""

    def __init__(self, in_channels, out_channels, kernel, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng()
        k3 = (kernel,) * 3 if np.isscalar(kernel) else tuple(kernel)
        self.spec = ConvSpec(in_channels, out_channels, k3, (1, 1, 1), ("valid", "same", "same"))
        fan_in = in_channels * int(np.prod(k3))
        self.params = {
            "kernels": uniform_init(rng, (out_channels, in_channels, *k3), fan_in, dtype),
            "bias": np.zeros(out_channels, dtype),
        }
        self.grads = {}
        self._cache = None

    def forward(self, x, mode="train", rng=None):
        b = x.shape[0]
        cols, (to, ho, wo) = im2col3d(x, self.spec)
        y = cols @ kernels_to_matrix(self.params["kernels"]) + self.params["bias"]
        self._cache = (cols, x.shape)
        return y.reshape(b, to, ho, wo, -1)

    def backward(self, dy):
        if self._cache is None:
            raise UsageError("backward called without a cached forward pass")
        cols, in_shape = self._cache
        self._cache = None
        dym = dy.reshape(-1, dy.shape[-1])
        self.grads["kernels"] = matrix_to_kernels(cols.T @ dym, self.params["kernels"].shape)
        self.grads["bias"] = dym.sum(axis=0)
        dcols = dym @ kernels_to_matrix(self.params["kernels"]).T
        return col2im3d(dcols, in_shape, self.spec)
