"""Dense rank-4 tensor operations with analytic gradients.

Tensors are plain ``numpy.ndarray`` objects laid out as (batch, channel,
height, width).  Every public op is a pure function: inputs are never
modified, and the output dtype follows the input dtype (float64 unless the
caller opts into float32).

The ``*_nhwc`` helpers are the training hot path used by the network
builder.  They work channel-last and keep the im2col buffer of a convolution
in a cache so the backward pass does not rebuild it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def as_tensor4(x, dtype=None) -> np.ndarray:
    """Validate ``x`` as a (n, c, h, w) array with all dims >= 1."""
    arr = np.asarray(x, dtype=dtype if dtype is not None else None)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 (n, c, h, w) tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"all tensor dims must be >= 1, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


@dataclass
class ConvParams:
    kernel: np.ndarray  # (out_ch, in_ch // groups, kh, kw)
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        k = self.kernel
        if k.ndim != 4:
            raise ShapeError(f"kernel must be (out, in/groups, kh, kw), got {k.shape}")
        out_ch, _, kh, kw = k.shape
        if self.groups < 1 or out_ch % self.groups:
            raise ConfigError(f"groups={self.groups} does not divide out_ch={out_ch}")
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"only odd kernels are supported, got {kh}x{kw}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ConfigError(f"padding must be >= 0, got {self.padding}")
        if self.bias is not None and self.bias.shape != (out_ch,):
            raise ShapeError(f"bias shape {self.bias.shape} does not match out_ch={out_ch}")

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    def __post_init__(self):
        c = self.gamma.shape
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != c:
                raise ShapeError(f"batch-norm {name} shape {getattr(self, name).shape} != gamma shape {c}")
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if np.any(self.running_var < 0):
            raise ConfigError("running_var must be non-negative")

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------
#
# Kernels below run on channel-last (n, h, w, c) arrays: 1x1 convolutions and
# batch-norm reductions become plain row-major matmuls / column sums.  The
# public NCHW ops transpose at the boundary.

def conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    return (h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kw) // stride + 1


def _check_conv(shape_nchw, p: ConvParams) -> tuple[int, int]:
    n, c, h, w = shape_nchw
    out_ch, cg, kh, kw = p.kernel.shape
    if c % p.groups:
        raise ConfigError(f"groups={p.groups} does not divide input channels={c}")
    if c != cg * p.groups:
        raise ShapeError(
            f"input shape {tuple(shape_nchw)} incompatible with kernel shape {p.kernel.shape} (groups={p.groups})"
        )
    if h + 2 * p.padding < kh or w + 2 * p.padding < kw:
        raise ShapeError(f"input shape {tuple(shape_nchw)} smaller than kernel shape {p.kernel.shape} after padding")
    return conv_output_hw(h, w, kh, kw, p.stride, p.padding)


def to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


@dataclass
class ConvCache:
    x_shape: tuple  # NHWC
    out_hw: tuple[int, int]
    cols: np.ndarray | None  # (N, c*kh*kw) patches, or padded input for depthwise


def _tap(a: np.ndarray, i: int, j: int, s: int, ho: int, wo: int) -> np.ndarray:
    return a[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :]


def _is_depthwise(p: ConvParams) -> bool:
    return p.groups > 1 and p.kernel.shape[1] == 1 and p.kernel.shape[0] == p.groups


def _im2col(xp: np.ndarray, p: ConvParams, ho: int, wo: int) -> np.ndarray:
    """Patches of a padded NHWC input as (N, groups, kh*kw, cg), tap-major per group."""
    n, _, _, c = xp.shape
    _, cg, kh, kw = p.kernel.shape
    g = p.groups
    cols = np.empty((n, ho, wo, g, kh * kw, cg), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, :, i * kw + j, :] = _tap(xp, i, j, p.stride, ho, wo).reshape(n, ho, wo, g, cg)
    return cols.reshape(n * ho * wo, g * kh * kw * cg)


def _kernel_matrix(p: ConvParams) -> np.ndarray:
    """Kernel as (out, kh*kw*cg) matching the im2col column order."""
    out_ch = p.kernel.shape[0]
    return p.kernel.transpose(0, 2, 3, 1).reshape(out_ch, -1)


def conv_fwd_nhwc(x: np.ndarray, p: ConvParams) -> tuple[np.ndarray, ConvCache]:
    """Bias-free convolution on an NHWC array; returns ``(y, cache)``."""
    n, h, w, c = x.shape
    ho, wo = _check_conv((n, c, h, w), p)
    out_ch, cg, kh, kw = p.kernel.shape
    s, g = p.stride, p.groups
    if _is_depthwise(p):
        xp = _pad_hw(x, p.padding)
        k = p.kernel[:, 0]
        y = np.zeros((n, ho, wo, c), dtype=x.dtype)
        tmp = np.empty_like(y)
        for i in range(kh):
            for j in range(kw):
                np.multiply(_tap(xp, i, j, s, ho, wo), k[:, i, j], out=tmp)
                y += tmp
        return y, ConvCache(x.shape, (ho, wo), xp)
    if kh == 1 and kw == 1 and p.padding == 0:
        sub = x if s == 1 else np.ascontiguousarray(_tap(x, 0, 0, s, ho, wo))
        cols = sub.reshape(n * ho * wo, c)
    else:
        cols = _im2col(_pad_hw(x, p.padding), p, ho, wo)
    kmat = _kernel_matrix(p)
    if g == 1:
        y = cols @ kmat.T
    else:
        og, kg = out_ch // g, cg * kh * kw
        y = np.empty((n * ho * wo, out_ch), dtype=x.dtype)
        for gi in range(g):
            y[:, gi * og : (gi + 1) * og] = cols[:, gi * kg : (gi + 1) * kg] @ kmat[gi * og : (gi + 1) * og].T
    return y.reshape(n, ho, wo, out_ch), ConvCache(x.shape, (ho, wo), cols)


def conv_bwd_nhwc(cache: ConvCache, p: ConvParams, dy: np.ndarray, need_input_grad: bool = True):
    """Return ``(d_input, d_kernel)`` for an NHWC upstream gradient."""
    n, h, w, c = cache.x_shape
    ho, wo = cache.out_hw
    out_ch, cg, kh, kw = p.kernel.shape
    s, g, pad = p.stride, p.groups, p.padding
    if dy.shape != (n, ho, wo, out_ch):
        raise ShapeError(f"upstream shape {_nchw_shape(dy.shape)} != conv output shape {(n, out_ch, ho, wo)}")
    if _is_depthwise(p):
        xp = cache.cols
        k = p.kernel[:, 0]
        dk = np.empty_like(p.kernel)
        dxp = np.zeros_like(xp) if need_input_grad else None
        tmp = np.empty_like(dy)
        for i in range(kh):
            for j in range(kw):
                tap = _tap(xp, i, j, s, ho, wo)
                np.multiply(tap, dy, out=tmp)
                dk[:, 0, i, j] = tmp.reshape(-1, c).sum(axis=0)
                if need_input_grad:
                    np.multiply(dy, k[:, i, j], out=tmp)
                    _tap(dxp, i, j, s, ho, wo)[...] += tmp
        if need_input_grad and pad:
            dxp = dxp[:, pad:-pad, pad:-pad, :]
        return dxp, dk
    dy2 = dy.reshape(n * ho * wo, out_ch)
    cols = cache.cols
    kmat = _kernel_matrix(p)
    og, kg = out_ch // g, cg * kh * kw
    if g == 1:
        dkm = dy2.T @ cols
    else:
        dkm = np.empty_like(kmat)
        for gi in range(g):
            dkm[gi * og : (gi + 1) * og] = dy2[:, gi * og : (gi + 1) * og].T @ cols[:, gi * kg : (gi + 1) * kg]
    dk = dkm.reshape(out_ch, kh, kw, cg).transpose(0, 3, 1, 2).copy()
    if not need_input_grad:
        return None, dk
    if g == 1:
        dcols = dy2 @ kmat
    else:
        dcols = np.empty((dy2.shape[0], g * kg), dtype=dy.dtype)
        for gi in range(g):
            dcols[:, gi * kg : (gi + 1) * kg] = dy2[:, gi * og : (gi + 1) * og] @ kmat[gi * og : (gi + 1) * og]
    if kh == 1 and kw == 1 and pad == 0:
        d = dcols.reshape(n, ho, wo, c)
        if s == 1:
            return d, dk
        dx = np.zeros((n, h, w, c), dtype=dy.dtype)
        _tap(dx, 0, 0, s, ho, wo)[...] = d
        return dx, dk
    dcols = dcols.reshape(n, ho, wo, g, kh * kw, cg)
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            _tap(dxp, i, j, s, ho, wo)[...] += dcols[:, :, :, :, i * kw + j, :].reshape(n, ho, wo, c)
    if pad:
        dxp = dxp[:, pad:-pad, pad:-pad, :]
    return dxp, dk


def _nchw_shape(shape) -> tuple:
    n, h, w, c = shape
    return n, c, h, w


def conv2d(input: np.ndarray, p: ConvParams) -> np.ndarray:
    """Zero-padded, strided, grouped 2-D cross-correlation on (n, c, h, w)."""
    x = as_tensor4(input)
    _check_conv(x.shape, p)
    y, _ = conv_fwd_nhwc(to_nhwc(x), p)
    if p.bias is not None:
        y = y + p.bias
    return to_nchw(y)


def conv2d_grad(input: np.ndarray, p: ConvParams, upstream: np.ndarray):
    """Return ``(d_input, d_kernel, d_bias)`` for upstream gradient ``upstream``."""
    x = as_tensor4(input)
    ho, wo = _check_conv(x.shape, p)
    upstream = np.asarray(upstream)
    expected = (x.shape[0], p.out_channels, ho, wo)
    if upstream.shape != expected:
        raise ShapeError(f"upstream shape {upstream.shape} != conv output shape {expected}")
    _, cache = conv_fwd_nhwc(to_nhwc(x), p)
    dx, dk = conv_bwd_nhwc(cache, p, to_nhwc(upstream))
    return to_nchw(dx), dk, upstream.sum(axis=(0, 2, 3))


# --------------------------------------------------------------------------
# batch norm
# --------------------------------------------------------------------------

@dataclass
class BNCache:
    centered: np.ndarray  # x - mean, NHWC
    inv_std: np.ndarray
    training: bool


def bn_fwd_nhwc(x: np.ndarray, p: BatchNormParams, training: bool):
    """Batch norm over all but the last axis.

    Returns ``(out, cache, new_running_mean, new_running_var)``; running
    statistics are returned rather than written so the caller decides who
    owns them.
    """
    c = x.shape[-1]
    if p.gamma.shape != (c,):
        raise ShapeError(f"batch-norm params have {p.gamma.shape[0]} channels, input has {c}")
    x2 = x.reshape(-1, c)
    if training:
        m = x2.shape[0]
        mean = x2.sum(axis=0) / m
        centered = x2 - mean
        var = np.einsum("nc,nc->c", centered, centered) / m
        inv_std = 1.0 / np.sqrt(var + p.eps)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        new_mean = (1 - p.momentum) * p.running_mean + p.momentum * mean
        new_var = (1 - p.momentum) * p.running_var + p.momentum * unbiased
    else:
        inv_std = 1.0 / np.sqrt(p.running_var + p.eps)
        centered = x2 - p.running_mean
        new_mean, new_var = p.running_mean, p.running_var
    inv_std = inv_std.astype(x.dtype, copy=False)
    out = centered * (p.gamma * inv_std)
    out += p.beta
    return out.reshape(x.shape), BNCache(centered, inv_std, training), new_mean, new_var


def bn_bwd_nhwc(cache: BNCache, p: BatchNormParams, upstream: np.ndarray):
    """Return ``(d_input, d_gamma, d_beta)``."""
    shape = upstream.shape
    dy = upstream.reshape(cache.centered.shape)
    inv_std = cache.inv_std
    d_beta = dy.sum(axis=0)
    d_gamma = np.einsum("nc,nc->c", dy, cache.centered) * inv_std
    scale = p.gamma * inv_std
    if not cache.training:
        return (dy * scale).reshape(shape), d_gamma, d_beta
    m = dy.shape[0]
    # dx = scale * (dy - mean(dy) - xhat * mean(dy * xhat))
    dx = dy * scale
    dx -= scale * d_beta / m
    dx -= cache.centered * (scale * inv_std * d_gamma / m)
    return dx.reshape(shape), d_gamma, d_beta


def _check_bn(x: np.ndarray, p: BatchNormParams):
    if p.gamma.shape != (x.shape[1],):
        raise ShapeError(f"batch-norm params have {p.gamma.shape[0]} channels, input shape {x.shape}")


def batchnorm(input: np.ndarray, p: BatchNormParams, training: bool) -> np.ndarray:
    """Normalize per channel over (n, h, w).

    In training mode the batch statistics are used and ``p.running_mean`` /
    ``p.running_var`` are replaced by their momentum-updated values; ``p`` must
    therefore be owned by the caller.  The input array is not modified.
    """
    x = as_tensor4(input)
    _check_bn(x, p)
    out, _, new_mean, new_var = bn_fwd_nhwc(to_nhwc(x), p, training)
    if training:
        p.running_mean = new_mean
        p.running_var = new_var
    return to_nchw(out)


def batchnorm_grad(input: np.ndarray, p: BatchNormParams, upstream: np.ndarray, training: bool = True):
    """Return ``(d_input, d_gamma, d_beta)``; running stats are left untouched."""
    x = as_tensor4(input)
    _check_bn(x, p)
    upstream = np.asarray(upstream)
    if upstream.shape != x.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != input shape {x.shape}")
    _, cache, _, _ = bn_fwd_nhwc(to_nhwc(x), p, training)
    dx, dg, db = bn_bwd_nhwc(cache, p, to_nhwc(upstream))
    return to_nchw(dx), dg, db

# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def relu(input: np.ndarray) -> np.ndarray:
    return np.maximum(input, 0)


def relu_grad(input: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(input) > 0, upstream, 0)


def sigmoid(input: np.ndarray) -> np.ndarray:
    x = np.asarray(input, dtype=np.result_type(input, np.float32))
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_grad(input: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    s = sigmoid(input)
    return upstream * s * (1.0 - s)


# --------------------------------------------------------------------------
# pooling, dense head, resampling
# --------------------------------------------------------------------------

def gap(input: np.ndarray) -> np.ndarray:
    """Global average pooling: (n, c, h, w) -> (n, c)."""
    x = as_tensor4(input)
    return x.sum(axis=(2, 3)) / (x.shape[2] * x.shape[3])


def gap_grad(input_shape, upstream: np.ndarray) -> np.ndarray:
    n, c, h, w = input_shape
    upstream = np.asarray(upstream)
    if upstream.shape != (n, c):
        raise ShapeError(f"upstream shape {upstream.shape} != pooled shape {(n, c)}")
    return np.broadcast_to((upstream / (h * w))[:, :, None, None], input_shape).copy()


def linear(input: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map ``input @ weights.T + bias``; weights are (classes, features)."""
    x = np.asarray(input)
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise ShapeError(f"features shape {x.shape} incompatible with weight shape {weights.shape}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match weight shape {weights.shape}")
    return x @ weights.T + bias


def linear_grad(input: np.ndarray, weights: np.ndarray, upstream: np.ndarray):
    """Return ``(d_input, d_weights, d_bias)``."""
    x = np.asarray(input)
    upstream = np.asarray(upstream)
    if upstream.shape != (x.shape[0], weights.shape[0]):
        raise ShapeError(f"upstream shape {upstream.shape} != output shape {(x.shape[0], weights.shape[0])}")
    return upstream @ weights, upstream.T @ x, upstream.sum(axis=0)


def _axis_coords(n_in: int, n_out: int):
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.floor(src).astype(np.intp)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resampling of a 2-D grid.

    Output corners coincide with input corners, so a resize never moves the
    extreme rows/columns and constant grids stay exactly constant.
    """
    g = np.asarray(grid)
    if g.ndim != 2:
        raise ShapeError(f"expected a 2-D grid, got shape {g.shape}")
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"output dims must be >= 1, got {(out_h, out_w)}")
    g = g.astype(np.result_type(g.dtype, np.float32), copy=False)
    r0, r1, fr = _axis_coords(g.shape[0], out_h)
    c0, c1, fc = _axis_coords(g.shape[1], out_w)
    fc = fc.astype(g.dtype)
    fr = fr.astype(g.dtype)
    top = g[r0][:, c0] + fc * (g[r0][:, c1] - g[r0][:, c0])
    bot = g[r1][:, c0] + fc * (g[r1][:, c1] - g[r1][:, c0])
    return top + fr[:, None] * (bot - top)
