"""Forward/backward kernels for every layer kind used by the two architectures.

Every forward returns ``(y, cache)``; the matching backward consumes that cache
and the upstream gradient. Kernels are vectorised with numpy and keep the
dtype of their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError
from .tensor import check_tensor

RELU_MODES = ("standard", "deconvnet", "guided")
PADDINGS = ("valid", "same")


@dataclass(frozen=True)
class ConvSpec:
    kernel_size: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: str = "same"
    has_bias: bool = False

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ShapeError(f"kernel size must be odd and >= 1, got {self.kernel_size}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be >= 1")
        if self.stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding not in PADDINGS:
            raise ShapeError(f"padding must be one of {PADDINGS}, got {self.padding!r}")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        oh, _, _ = window_geometry(h, self.kernel_size, self.stride, self.padding)
        ow, _, _ = window_geometry(w, self.kernel_size, self.stride, self.padding)
        return oh, ow


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-3
    momentum: float = 0.99

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            **kw,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def __post_init__(self):
        c = self.gamma.shape[0]
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != (c,):
                raise ShapeError(f"batch-norm {name} must have length {c}")
        if self.epsilon <= 0:
            raise ShapeError("epsilon must be positive")


@dataclass
class LayerCache:
    kind: str
    saved: dict = field(default_factory=dict)


def _expect(cache, kind):
    if cache is None:
        raise ContractError(f"{kind} backward called without a forward cache")
    if not isinstance(cache, LayerCache) or cache.kind != kind:
        raise ContractError(f"{kind} backward got a cache from {getattr(cache, 'kind', cache)!r}")
    return cache.saved


def window_geometry(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return (output size, pad before, pad after) along one spatial axis.

    "same" gives ceil(size / stride) outputs; extra padding goes after.
    """
    if padding == "valid":
        if k > size:
            raise ShapeError(f"window {k} larger than input {size}")
        return (size - k) // stride + 1, 0, 0
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    raise ShapeError(f"unknown padding {padding!r}")


def _pad(x, k, stride, padding, value=0.0):
    _, _, h, w = x.shape
    oh, pt, pb = window_geometry(h, k, stride, padding)
    ow, pl, pr = window_geometry(w, k, stride, padding)
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=value)
    if k > x.shape[2] or k > x.shape[3]:
        raise ShapeError(f"window {k} larger than padded input {x.shape[2:]}")
    return x, (oh, ow), (pt, pl)


def _windows(xp, k, stride, oh, ow):
    """View of shape (n, c, oh, ow, k, k) over a padded input."""
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, ::stride, ::stride][:, :, :oh, :ow]


def _unpad(dxp, shape, top, left):
    _, _, h, w = shape
    return dxp[:, :, top : top + h, left : left + w]


def _scatter_windows(dcols, xp_shape, k, stride, oh, ow):
    """Adjoint of ``_windows``: sum (n, c, oh, ow, k, k) contributions into a padded grid."""
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    hi_y, hi_x = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for ky in range(k):
        for kx in range(k):
            dxp[:, :, ky : ky + hi_y : stride, kx : kx + hi_x : stride] += dcols[..., ky, kx]
    return dxp


# --- standard convolution ---------------------------------------------------


def conv2d_forward(x, weights, bias, spec: ConvSpec, keep_cache: bool = True):
    check_tensor(x, "input")
    D, M, N = spec.kernel_size, spec.in_channels, spec.out_channels
    if x.shape[1] != M:
        raise ShapeError(f"conv expects {M} input channels, got {x.shape[1]}")
    if weights.shape != (N, M, D, D):
        raise ShapeError(f"conv weights must be {(N, M, D, D)}, got {weights.shape}")
    if spec.has_bias and (bias is None or bias.shape != (N,)):
        raise ShapeError(f"conv bias must have shape {(N,)}")
    xp, (oh, ow), (top, left) = _pad(x, D, spec.stride, spec.padding)
    cols = _windows(xp, D, spec.stride, oh, ow)
    y = np.tensordot(cols, weights, axes=([1, 4, 5], [1, 2, 3]))  # (n, oh, ow, N)
    y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    if spec.has_bias:
        y += bias[None, :, None, None]
    cache = None
    if keep_cache:
        cache = LayerCache("conv", dict(xp=xp, x_shape=x.shape, w=weights, spec=spec,
                                        out_hw=(oh, ow), offset=(top, left)))
    return y, cache


def conv2d_backward(cache, upstream):
    s = _expect(cache, "conv")
    spec, w, xp = s["spec"], s["w"], s["xp"]
    D, (oh, ow) = spec.kernel_size, s["out_hw"]
    if upstream.shape[1:] != (spec.out_channels, oh, ow):
        raise ShapeError(f"upstream shape {upstream.shape} does not match conv output")
    cols = _windows(xp, D, spec.stride, oh, ow)
    d_w = np.tensordot(upstream, cols, axes=([0, 2, 3], [0, 2, 3]))  # (N, M, D, D)
    d_b = upstream.sum(axis=(0, 2, 3)) if spec.has_bias else None
    dcols = np.tensordot(upstream, w, axes=([1], [0]))  # (n, oh, ow, M, D, D)
    dcols = dcols.transpose(0, 3, 1, 2, 4, 5)
    dxp = _scatter_windows(dcols, xp.shape, D, spec.stride, oh, ow)
    d_x = np.ascontiguousarray(_unpad(dxp, s["x_shape"], *s["offset"]))
    return d_x, d_w, d_b


# --- depth-wise / point-wise / separable -------------------------------------


def depthwise_conv_forward(x, weights, spec: ConvSpec, keep_cache: bool = True):
    """One D x D filter per input channel; ``spec.out_channels`` is ignored."""
    check_tensor(x, "input")
    D, M = spec.kernel_size, spec.in_channels
    if x.shape[1] != M:
        raise ShapeError(f"depthwise conv expects {M} channels, got {x.shape[1]}")
    if weights.shape != (M, 1, D, D):
        raise ShapeError(f"depthwise weights must be {(M, 1, D, D)}, got {weights.shape}")
    xp, (oh, ow), (top, left) = _pad(x, D, spec.stride, spec.padding)
    s, hi_y, hi_x = spec.stride, spec.stride * (oh - 1) + 1, spec.stride * (ow - 1) + 1
    y = np.zeros((x.shape[0], M, oh, ow), dtype=np.result_type(x, weights))
    for ky in range(D):
        for kx in range(D):
            y += xp[:, :, ky : ky + hi_y : s, kx : kx + hi_x : s] * weights[None, :, 0, ky, kx, None, None]
    cache = None
    if keep_cache:
        cache = LayerCache("depthwise", dict(xp=xp, x_shape=x.shape, w=weights, spec=spec,
                                             out_hw=(oh, ow), offset=(top, left)))
    return y, cache


def depthwise_backward(cache, upstream):
    s_ = _expect(cache, "depthwise")
    spec, w, xp = s_["spec"], s_["w"], s_["xp"]
    D, (oh, ow) = spec.kernel_size, s_["out_hw"]
    s, hi_y, hi_x = spec.stride, spec.stride * (oh - 1) + 1, spec.stride * (ow - 1) + 1
    d_w = np.zeros_like(w)
    dxp = np.zeros(xp.shape, dtype=upstream.dtype)
    for ky in range(D):
        for kx in range(D):
            win = xp[:, :, ky : ky + hi_y : s, kx : kx + hi_x : s]
            d_w[:, 0, ky, kx] = (win * upstream).sum(axis=(0, 2, 3))
            dxp[:, :, ky : ky + hi_y : s, kx : kx + hi_x : s] += upstream * w[None, :, 0, ky, kx, None, None]
    d_x = np.ascontiguousarray(_unpad(dxp, s_["x_shape"], *s_["offset"]))
    return d_x, d_w


def pointwise_conv_forward(x, weights, spec: ConvSpec, keep_cache: bool = True):
    check_tensor(x, "input")
    if spec.kernel_size != 1:
        raise ContractError(f"pointwise conv needs kernel size 1, got {spec.kernel_size}")
    M, N = spec.in_channels, spec.out_channels
    if x.shape[1] != M:
        raise ShapeError(f"pointwise conv expects {M} channels, got {x.shape[1]}")
    if weights.shape != (N, M, 1, 1):
        raise ShapeError(f"pointwise weights must be {(N, M, 1, 1)}, got {weights.shape}")
    xs = x[:, :, :: spec.stride, :: spec.stride]
    n, _, h, w = xs.shape
    y = np.matmul(weights[:, :, 0, 0], xs.reshape(n, M, h * w)).reshape(n, N, h, w)
    cache = LayerCache("pointwise", dict(xs=xs, x_shape=x.shape, w=weights, spec=spec)) if keep_cache else None
    return y, cache


def pointwise_backward(cache, upstream):
    s = _expect(cache, "pointwise")
    xs, w, spec = s["xs"], s["w"][:, :, 0, 0], s["spec"]
    n, M, h, wd = xs.shape
    g = upstream.reshape(n, spec.out_channels, h * wd)
    d_w = np.tensordot(g, xs.reshape(n, M, h * wd), axes=([0, 2], [0, 2]))[:, :, None, None]
    d_xs = np.matmul(w.T, g).reshape(n, M, h, wd)
    if spec.stride == 1:
        return d_xs, d_w
    d_x = np.zeros(s["x_shape"], dtype=upstream.dtype)
    d_x[:, :, :: spec.stride, :: spec.stride] = d_xs
    return d_x, d_w


def _separable_parts(spec: ConvSpec):
    dw = ConvSpec(spec.kernel_size, spec.in_channels, spec.in_channels, spec.stride, spec.padding)
    pw = ConvSpec(1, spec.in_channels, spec.out_channels, 1, "valid")
    return dw, pw


def separable_conv_forward(x, dw_weights, pw_weights, spec: ConvSpec, keep_cache: bool = True):
    dw_spec, pw_spec = _separable_parts(spec)
    mid, c1 = depthwise_conv_forward(x, dw_weights, dw_spec, keep_cache)
    y, c2 = pointwise_conv_forward(mid, pw_weights, pw_spec, keep_cache)
    return y, (LayerCache("separable", dict(dw=c1, pw=c2)) if keep_cache else None)


def separable_backward(cache, upstream):
    s = _expect(cache, "separable")
    d_mid, d_pw = pointwise_backward(s["pw"], upstream)
    d_x, d_dw = depthwise_backward(s["dw"], d_mid)
    return d_x, d_dw, d_pw


def mult_count(kind: str, spec: ConvSpec, out_h: int, out_w: int) -> int:
    """Multiply-accumulates needed to produce an ``out_h`` x ``out_w`` output."""
    D, M, N, px = spec.kernel_size, spec.in_channels, spec.out_channels, out_h * out_w
    if kind == "conv":
        return D * D * M * N * px
    if kind == "depthwise":
        return D * D * M * px
    if kind == "pointwise":
        return M * N * px
    if kind == "separable":
        return D * D * M * px + M * N * px
    raise ValueError(f"unknown layer kind {kind!r}")


def separable_cost_ratio(spec: ConvSpec, out_h: int = 1, out_w: int = 1) -> Fraction:
    return Fraction(mult_count("separable", spec, out_h, out_w), mult_count("conv", spec, out_h, out_w))


# --- batch normalisation ------------------------------------------------------


def batchnorm_forward(x, state: BatchNormState, mode: str = "infer", keep_cache: bool = True):
    check_tensor(x, "input")
    if x.shape[1] != state.channels:
        raise ShapeError(f"batch norm has {state.channels} channels, input has {x.shape[1]}")
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean *= m
        state.running_mean += (1 - m) * mean
        state.running_var *= m
        state.running_var += (1 - m) * var
    elif mode == "infer":
        mean, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv = (1.0 / np.sqrt(var + state.epsilon)).astype(x.dtype)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    y = xhat * state.gamma[None, :, None, None] + state.beta[None, :, None, None]
    cache = None
    if keep_cache:
        cache = LayerCache("batchnorm", dict(xhat=xhat, inv=inv, gamma=state.gamma.copy(), mode=mode))
    return y, cache


def batchnorm_backward(cache, upstream):
    s = _expect(cache, "batchnorm")
    xhat, inv, gamma = s["xhat"], s["inv"], s["gamma"]
    axes = (0, 2, 3)
    d_gamma = (upstream * xhat).sum(axis=axes)
    d_beta = upstream.sum(axis=axes)
    dxhat = upstream * gamma[None, :, None, None]
    if s["mode"] == "infer":
        return dxhat * inv[None, :, None, None], d_gamma, d_beta
    m = upstream.shape[0] * upstream.shape[2] * upstream.shape[3]
    d_x = (inv[None, :, None, None] / m) * (
        m * dxhat
        - dxhat.sum(axis=axes, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
    )
    return d_x, d_gamma, d_beta


# --- activations, pooling, heads ----------------------------------------------


def relu_forward(x, keep_cache: bool = True):
    y = np.maximum(x, 0)
    return y, (LayerCache("relu", dict(f=x)) if keep_cache else None)


def relu_backward(cache, upstream, mode: str = "standard"):
    """Back-propagate through a ReLU.

    standard:  R * (f > 0)              (true gradient)
    deconvnet: R * (R > 0)              (negative gradients filtered)
    guided:    R * (f > 0) * (R > 0)
    """
    if mode not in RELU_MODES:
        raise ValueError(f"unknown relu mode {mode!r}")
    zero = upstream.dtype.type(0)
    if mode == "deconvnet":
        return np.where(upstream > 0, upstream, zero)
    f = _expect(cache, "relu")["f"]
    if mode == "standard":
        return np.where(f > 0, upstream, zero)
    return np.where((f > 0) & (upstream > 0), upstream, zero)


def maxpool_forward(x, window: int = 3, stride: int = 2, padding: str = "same", keep_cache: bool = True):
    check_tensor(x, "input")
    if window < 1 or stride < 1:
        raise ShapeError("window and stride must be >= 1")
    xp, (oh, ow), (top, left) = _pad(x, window, stride, padding, value=-np.inf)
    n, c = x.shape[:2]
    wins = _windows(xp, window, stride, oh, ow).reshape(n, c, oh, ow, window * window)
    # argmax picks the first maximum in row-major window order
    arg = wins.argmax(axis=-1)
    y = np.take_along_axis(wins, arg[..., None], axis=-1)[..., 0]
    cache = None
    if keep_cache:
        cache = LayerCache("maxpool", dict(arg=arg, xp_shape=xp.shape, x_shape=x.shape, window=window,
                                           stride=stride, offset=(top, left)))
    return y, cache


def maxpool_backward(cache, upstream):
    s = _expect(cache, "maxpool")
    k, stride, arg = s["window"], s["stride"], s["arg"]
    oh, ow = arg.shape[2:]
    dxp = np.zeros(s["xp_shape"], dtype=upstream.dtype)
    hi_y, hi_x = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    zero = upstream.dtype.type(0)
    for j in range(k * k):
        ky, kx = divmod(j, k)
        dxp[:, :, ky : ky + hi_y : stride, kx : kx + hi_x : stride] += np.where(arg == j, upstream, zero)
    return np.ascontiguousarray(_unpad(dxp, s["x_shape"], *s["offset"]))


def gap_forward(x, keep_cache: bool = True):
    check_tensor(x, "input")
    y = x.mean(axis=(2, 3), keepdims=True)
    return y, (LayerCache("gap", dict(x_shape=x.shape)) if keep_cache else None)


def gap_backward(cache, upstream):
    shape = _expect(cache, "gap")["x_shape"]
    h, w = shape[2:]
    return np.broadcast_to(upstream / (h * w), shape).copy()


def softmax_forward(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(probs, upstream):
    return probs * (upstream - (upstream * probs).sum(axis=1, keepdims=True))


def residual_add(main, skip):
    """H(x) = F(x) + x; the skip branch must already match the main branch's shape."""
    if main.shape != skip.shape:
        raise ShapeError(f"residual branches differ: {main.shape} vs {skip.shape}")
    return main + skip


def residual_backward(upstream):
    return upstream, upstream


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))
