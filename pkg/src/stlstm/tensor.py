"""Dense tensor kernels: elementwise math and 2D/3D convolution.

Tensors are plain numpy arrays, float32 by default; every operation runs in
the dtype of its inputs, so gradient checking simply feeds float64 arrays.
Public convolution entry points use the channels-first layout documented on
each function. The fast kernels are im2col + GEMM; `conv2d_naive` and
`conv3d_naive` are straight loop transcriptions kept as reference oracles.

Convolution here is cross-correlation (no kernel flip), `same` padding is
zero padding split floor/ceil around the input, and strided `same` output
extent is ceil(input / stride).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, NumericalError

DEFAULT_DTYPE = np.float32

_checked = False


def set_checked(flag):
    """Globally enable/disable finite-input validation on public ops."""
    global _checked
    _checked = bool(flag)


@contextlib.contextmanager
def checked_mode():
    """Context manager enabling finite-input validation."""
    global _checked
    prev = _checked
    _checked = True
    try:
        yield
    finally:
        _checked = prev


def _require_finite(name, a):
    if _checked and not np.isfinite(a).all():
        raise NumericalError(f"non-finite values in '{name}'")


@dataclass(frozen=True)
class ConvSpec:
    """Shape contract of one convolution.

    kernel/stride/padding hold one entry per sliding axis: (kH, kW) for 2D,
    (kT, kH, kW) for 3D. padding entries are 'same' or 'valid'.
    """

    in_channels: int
    out_channels: int
    kernel: tuple
    stride: tuple
    padding: tuple

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError("channel counts must be positive")
        if not (len(self.kernel) == len(self.stride) == len(self.padding)):
            raise ConfigurationError("kernel/stride/padding lengths differ")
        if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride):
            raise ConfigurationError("kernel extents and strides must be positive")
        if any(p not in ("same", "valid") for p in self.padding):
            raise ConfigurationError(f"padding entries must be 'same' or 'valid', got {self.padding}")

    @classmethod
    def make(cls, in_channels, out_channels, kernel, stride=1, padding="same", ndim=2):
        """Build a spec, broadcasting scalar kernel/stride/padding over `ndim` axes."""
        tup = lambda v: tuple(v) if isinstance(v, (tuple, list)) else (v,) * ndim
        return cls(in_channels, out_channels, tup(kernel), tup(stride), tup(padding))

    def out_extent(self, in_extent, axis):
        """Output extent along sliding `axis` for the given input extent."""
        k, s, p = self.kernel[axis], self.stride[axis], self.padding[axis]
        if p == "same":
            return -(-in_extent // s)  # ceil
        out = (in_extent - k) // s + 1
        if out < 1:
            raise DimensionError(
                f"axis {axis}: input extent {in_extent} < kernel {k} under valid padding"
            )
        return out

    def pad_amounts(self, in_extent, axis):
        """(before, after) zero padding along sliding `axis`."""
        k, s, p = self.kernel[axis], self.stride[axis], self.padding[axis]
        if p == "valid":
            return 0, 0
        out = self.out_extent(in_extent, axis)
        total = max((out - 1) * s + k - in_extent, 0)
        return total // 2, total - total // 2


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def sigmoid(x):
    """Logistic function, computed as 0.5*(1 + tanh(x/2)) for stability and speed."""
    x = np.asarray(x)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_BINARY_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "hadamard": np.multiply,
}
_UNARY_OPS = {
    "sigmoid": sigmoid,
    "tanh": np.tanh,
}


def elementwise(op, a, b=None):
    """Pointwise op dispatch: add/sub/hadamard (binary, equal shapes),
    sigmoid/tanh (unary), scale (array * scalar b)."""
    a = np.asarray(a)
    _require_finite("a", a)
    if op in _BINARY_OPS:
        if b is None:
            raise ConfigurationError(f"'{op}' needs a second operand")
        b = np.asarray(b)
        _require_finite("b", b)
        if a.shape != b.shape:
            raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
        return _BINARY_OPS[op](a, b)
    if op in _UNARY_OPS:
        return _UNARY_OPS[op](a)
    if op == "scale":
        if b is None:
            raise ConfigurationError("'scale' needs a scalar second operand")
        return a * float(b)
    raise ConfigurationError(f"unknown elementwise op '{op}'")


# ---------------------------------------------------------------------------
# naive reference kernels (channels-first, explicit loops)
# ---------------------------------------------------------------------------

def conv2d_naive(x, kernels, bias, spec):
    """Direct-loop cross-correlation. x (C,H,W), kernels (Cout,Cin,kH,kW)."""
    _validate_2d(x, kernels, bias, spec)
    cin, h, w = x.shape
    cout = spec.out_channels
    kh, kw = spec.kernel
    sh, sw = spec.stride
    ph, _ = spec.pad_amounts(h, 0)
    pw, _ = spec.pad_amounts(w, 1)
    ho, wo = spec.out_extent(h, 0), spec.out_extent(w, 1)
    out = np.zeros((cout, ho, wo), dtype=x.dtype)
    for co in range(cout):
        for oy in range(ho):
            for ox in range(wo):
                acc = bias[co]
                for ci in range(cin):
                    for i in range(kh):
                        for j in range(kw):
                            iy = oy * sh + i - ph
                            ix = ox * sw + j - pw
                            if 0 <= iy < h and 0 <= ix < w:
                                acc += x[ci, iy, ix] * kernels[co, ci, i, j]
                out[co, oy, ox] = acc
    return out


def conv3d_naive(x, kernels, bias, spec):
    """Direct-loop 3D cross-correlation. x (C,T,H,W), kernels (Cout,Cin,kT,kH,kW)."""
    _validate_3d(x, kernels, bias, spec)
    cin, t, h, w = x.shape
    cout = spec.out_channels
    kt, kh, kw = spec.kernel
    st, sh, sw = spec.stride
    pt, _ = spec.pad_amounts(t, 0)
    ph, _ = spec.pad_amounts(h, 1)
    pw, _ = spec.pad_amounts(w, 2)
    to, ho, wo = (spec.out_extent(t, 0), spec.out_extent(h, 1), spec.out_extent(w, 2))
    out = np.zeros((cout, to, ho, wo), dtype=x.dtype)
    for co in range(cout):
        for ot in range(to):
            for oy in range(ho):
                for ox in range(wo):
                    acc = bias[co]
                    for ci in range(cin):
                        for dt in range(kt):
                            for i in range(kh):
                                for j in range(kw):
                                    it = ot * st + dt - pt
                                    iy = oy * sh + i - ph
                                    ix = ox * sw + j - pw
                                    if 0 <= it < t and 0 <= iy < h and 0 <= ix < w:
                                        acc += x[ci, it, iy, ix] * kernels[co, ci, dt, i, j]
                    out[co, ot, oy, ox] = acc
    return out


# ---------------------------------------------------------------------------
# im2col machinery (batched, channels-last internally)
# ---------------------------------------------------------------------------
# Column order along the reduction axis is (offset..., channel); weight
# matrices produced by kernels_to_matrix follow the same order.

def im2col2d(xb, spec):
    """xb (B,H,W,C) -> (cols (B*Ho*Wo, kH*kW*C), (Ho, Wo)). Copies once."""
    b, h, w, c = xb.shape
    kh, kw = spec.kernel
    sh, sw = spec.stride
    (pt, pb), (pl, pr) = spec.pad_amounts(h, 0), spec.pad_amounts(w, 1)
    if pt or pb or pl or pr:
        xb = np.pad(xb, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    v = sliding_window_view(xb, (kh, kw), axis=(1, 2))  # (B,Ho*,Wo*,C,kh,kw)
    v = v[:, ::sh, ::sw]
    ho, wo = v.shape[1], v.shape[2]
    cols = v.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, kh * kw * c)
    return cols, (ho, wo)


def col2im2d(dcols, in_shape, spec):
    """Scatter-add column gradients back to dx (B,H,W,C)."""
    b, h, w, c = in_shape
    kh, kw = spec.kernel
    sh, sw = spec.stride
    (pt, pb), (pl, pr) = spec.pad_amounts(h, 0), spec.pad_amounts(w, 1)
    hp, wp = h + pt + pb, w + pl + pr
    ho = spec.out_extent(h, 0)
    wo = spec.out_extent(w, 1)
    g = dcols.reshape(b, ho, wo, kh, kw, c)
    dxp = np.zeros((b, hp, wp, c), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw, :] += g[:, :, :, i, j, :]
    return dxp[:, pt : pt + h, pl : pl + w, :]


def im2col3d(xb, spec):
    """xb (B,T,H,W,C) -> (cols (B*To*Ho*Wo, kT*kH*kW*C), (To, Ho, Wo))."""
    b, t, h, w, c = xb.shape
    kt, kh, kw = spec.kernel
    st, sh, sw = spec.stride
    pads = [spec.pad_amounts(e, ax) for ax, e in enumerate((t, h, w))]
    if any(p != (0, 0) for p in pads):
        xb = np.pad(xb, ((0, 0), pads[0], pads[1], pads[2], (0, 0)))
    v = sliding_window_view(xb, (kt, kh, kw), axis=(1, 2, 3))
    v = v[:, ::st, ::sh, ::sw]
    to, ho, wo = v.shape[1:4]
    cols = v.transpose(0, 1, 2, 3, 5, 6, 7, 4).reshape(b * to * ho * wo, kt * kh * kw * c)
    return cols, (to, ho, wo)


def col2im3d(dcols, in_shape, spec):
    b, t, h, w, c = in_shape
    kt, kh, kw = spec.kernel
    st, sh, sw = spec.stride
    pads = [spec.pad_amounts(e, ax) for ax, e in enumerate((t, h, w))]
    tp, hp, wp = (t + sum(pads[0]), h + sum(pads[1]), w + sum(pads[2]))
    to, ho, wo = (spec.out_extent(t, 0), spec.out_extent(h, 1), spec.out_extent(w, 2))
    g = dcols.reshape(b, to, ho, wo, kt, kh, kw, c)
    dxp = np.zeros((b, tp, hp, wp, c), dtype=dcols.dtype)
    for dt in range(kt):
        for i in range(kh):
            for j in range(kw):
                dxp[
                    :,
                    dt : dt + (to - 1) * st + 1 : st,
                    i : i + (ho - 1) * sh + 1 : sh,
                    j : j + (wo - 1) * sw + 1 : sw,
                    :,
                ] += g[:, :, :, :, dt, i, j, :]
    return dxp[:, pads[0][0] : pads[0][0] + t, pads[1][0] : pads[1][0] + h, pads[2][0] : pads[2][0] + w, :]


def kernels_to_matrix(kernels):
    """(Cout, Cin, *k) -> GEMM weight matrix (prod(k)*Cin, Cout), offset-major."""
    nk = kernels.ndim - 2
    perm = tuple(range(2, 2 + nk)) + (1, 0)
    return np.ascontiguousarray(kernels.transpose(perm)).reshape(-1, kernels.shape[0])


def matrix_to_kernels(wmat, kernel_shape):
    """Inverse of kernels_to_matrix for gradient repacking."""
    cout, cin = kernel_shape[0], kernel_shape[1]
    k = kernel_shape[2:]
    nk = len(k)
    inv = (nk + 1,) + tuple(range(nk)) + (nk,)
    return np.ascontiguousarray(wmat.reshape(*k, cin, cout).transpose(*inv))


# ---------------------------------------------------------------------------
# fast public kernels (channels-first contracts)
# ---------------------------------------------------------------------------

def _validate_2d(x, kernels, bias, spec):
    if x.ndim != 3:
        raise DimensionError(f"input rank: expected 3 (C,H,W), got {x.ndim}")
    if kernels.shape != (spec.out_channels, spec.in_channels, *spec.kernel):
        raise DimensionError(
            f"kernel shape: expected {(spec.out_channels, spec.in_channels, *spec.kernel)}, got {kernels.shape}"
        )
    if x.shape[0] != spec.in_channels:
        raise DimensionError(f"input channel axis: expected {spec.in_channels}, got {x.shape[0]}")
    if bias.shape != (spec.out_channels,):
        raise DimensionError(f"bias axis: expected ({spec.out_channels},), got {bias.shape}")
    for ax in range(len(spec.kernel)):
        spec.out_extent(x.shape[1 + ax], ax)  # raises on impossible valid extents
    _require_finite("input", x)
    _require_finite("kernels", kernels)


def _validate_3d(x, kernels, bias, spec):
    if x.ndim != 4:
        raise DimensionError(f"input rank: expected 4 (C,T,H,W), got {x.ndim}")
    if kernels.shape != (spec.out_channels, spec.in_channels, *spec.kernel):
        raise DimensionError(
            f"kernel shape: expected {(spec.out_channels, spec.in_channels, *spec.kernel)}, got {kernels.shape}"
        )
    if x.shape[0] != spec.in_channels:
        raise DimensionError(f"input channel axis: expected {spec.in_channels}, got {x.shape[0]}")
    if bias.shape != (spec.out_channels,):
        raise DimensionError(f"bias axis: expected ({spec.out_channels},), got {bias.shape}")
    for ax in range(len(spec.kernel)):
        spec.out_extent(x.shape[1 + ax], ax)
    _require_finite("input", x)
    _require_finite("kernels", kernels)


def conv2d(x, kernels, bias, spec):
    """Cross-correlation of x (Cin,H,W) with kernels (Cout,Cin,kH,kW) -> (Cout,Ho,Wo)."""
    _validate_2d(x, kernels, bias, spec)
    xb = np.ascontiguousarray(x.transpose(1, 2, 0))[None]
    cols, (ho, wo) = im2col2d(xb, spec)
    y = cols @ kernels_to_matrix(kernels) + bias
    return np.ascontiguousarray(y.reshape(ho, wo, -1).transpose(2, 0, 1))


def conv2d_backward(x, kernels, grad_output, spec):
    """Exact gradients of conv2d under sum-style upstream grad_output (Cout,Ho,Wo).

    Returns (grad_input, grad_kernels, grad_bias)."""
    _validate_2d(x, kernels, np.zeros(spec.out_channels, x.dtype), spec)
    ho, wo = spec.out_extent(x.shape[1], 0), spec.out_extent(x.shape[2], 1)
    if grad_output.shape != (spec.out_channels, ho, wo):
        raise DimensionError(
            f"grad_output shape: expected {(spec.out_channels, ho, wo)}, got {grad_output.shape}"
        )
    xb = np.ascontiguousarray(x.transpose(1, 2, 0))[None]
    cols, _ = im2col2d(xb, spec)
    dy = np.ascontiguousarray(grad_output.transpose(1, 2, 0)).reshape(ho * wo, -1)
    wmat = kernels_to_matrix(kernels)
    grad_bias = dy.sum(axis=0)
    grad_kernels = matrix_to_kernels(cols.T @ dy, kernels.shape)
    dcols = dy @ wmat.T
    grad_input = col2im2d(dcols, xb.shape, spec)[0].transpose(2, 0, 1)
    return np.ascontiguousarray(grad_input), grad_kernels, grad_bias


def conv3d(x, kernels, bias, spec):
    """3D cross-correlation of x (Cin,T,H,W) with kernels (Cout,Cin,kT,kH,kW)."""
    _validate_3d(x, kernels, bias, spec)
    xb = np.ascontiguousarray(x.transpose(1, 2, 3, 0))[None]
    cols, (to, ho, wo) = im2col3d(xb, spec)
    y = cols @ kernels_to_matrix(kernels) + bias
    return np.ascontiguousarray(y.reshape(to, ho, wo, -1).transpose(3, 0, 1, 2))


def conv3d_backward(x, kernels, grad_output, spec):
    """Exact gradients of conv3d; mirrors conv2d_backward."""
    _validate_3d(x, kernels, np.zeros(spec.out_channels, x.dtype), spec)
    to = spec.out_extent(x.shape[1], 0)
    ho = spec.out_extent(x.shape[2], 1)
    wo = spec.out_extent(x.shape[3], 2)
    if grad_output.shape != (spec.out_channels, to, ho, wo):
        raise DimensionError(
            f"grad_output shape: expected {(spec.out_channels, to, ho, wo)}, got {grad_output.shape}"
        )
    xb = np.ascontiguousarray(x.transpose(1, 2, 3, 0))[None]
    cols, _ = im2col3d(xb, spec)
    dy = np.ascontiguousarray(grad_output.transpose(1, 2, 3, 0)).reshape(to * ho * wo, -1)
    wmat = kernels_to_matrix(kernels)
    grad_bias = dy.sum(axis=0)
    grad_kernels = matrix_to_kernels(cols.T @ dy, kernels.shape)
    grad_input = col2im3d(dy @ wmat.T, xb.shape, spec)[0].transpose(3, 0, 1, 2)
    return np.ascontiguousarray(grad_input), grad_kernels, grad_bias
