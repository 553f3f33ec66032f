"""Dense float64 layer ops with hand-written forward and backward passes.

Activations use a leading batch axis: ``(N, C, H, W, T)`` for convolutional
feature maps. Every op is a pure function; backward functions take whatever
the matching forward returned as its cache.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

# im2col buffers above this many elements are built in batch chunks.
_COLS_BUDGET = 8_000_000


class DimensionError(ValueError):
    """Raised when an operand's shape does not fit the op."""


@dataclass(frozen=True)
class ConvSpec:
    """Shape contract of one valid-padding 3-D convolution.

    ``groups == 1`` is a dense convolution across channels; ``groups ==
    in_channels`` is depthwise, in which case ``out_channels / in_channels``
    is the depth multiplier.
    """

    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int] = (1, 1, 1)
    groups: int = 1

    def __post_init__(self):
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise DimensionError(
                f"channels ({self.in_channels} in, {self.out_channels} out) "
                f"not divisible by groups={self.groups}"
            )
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise DimensionError(f"bad kernel {self.kernel} / stride {self.stride}")

    @classmethod
    def depthwise(cls, channels, kernel, stride=(1, 1, 1), multiplier=1):
        return cls(channels, channels * multiplier, tuple(kernel), tuple(stride), groups=channels)

    @property
    def depth_multiplier(self) -> int:
        return self.out_channels // self.groups if self.groups == self.in_channels else 1

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    @property
    def fan_in(self) -> int:
        kh, kw, kt = self.kernel
        return self.in_channels // self.groups * kh * kw * kt

    def output_extent(self, extent: tuple[int, int, int]) -> tuple[int, int, int]:
        out = []
        for axis, n, k, s in zip("HWT", extent, self.kernel, self.stride):
            if n < k:
                raise DimensionError(f"axis {axis}: extent {n} smaller than kernel {k}")
            out.append((n - k) // s + 1)
        return tuple(out)


def _as_batch(x):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 4:
        return x[None], True
    if x.ndim != 5:
        raise DimensionError(f"expected (N,)C,H,W,T input, got shape {x.shape}")
    return x, False


def _check_input(x, spec):
    if x.shape[1] != spec.in_channels:
        raise DimensionError(f"axis C: got {x.shape[1]} channels, spec expects {spec.in_channels}")
    return spec.output_extent(x.shape[2:])


def _chunks(n, row_cost):
    step = max(1, _COLS_BUDGET // max(row_cost, 1))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def _im2col(x, spec, out_ext):
    """(N, C, H, W, T) -> (G, N*Ho*Wo*To, Cg*kh*kw*kt)."""
    n = x.shape[0]
    g = spec.groups
    cg = spec.in_channels // g
    sh, sw, st = spec.stride
    ho, wo, to = out_ext
    win = sliding_window_view(x, spec.kernel, axis=(2, 3, 4))
    win = win[:, :, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw, : st * (to - 1) + 1 : st]
    win = win.reshape(n, g, cg, ho, wo, to, *spec.kernel)
    win = win.transpose(1, 0, 3, 4, 5, 2, 6, 7, 8)
    return win.reshape(g, n * ho * wo * to, cg * int(np.prod(spec.kernel)))


def _grouped_weight(weight, spec):
    """(O, Cg, kh, kw, kt) -> (G, Cg*K, Og)."""
    g = spec.groups
    og = spec.out_channels // g
    return weight.reshape(g, og, -1).transpose(0, 2, 1)


def conv_forward(x, spec: ConvSpec, weight, bias):
    """Valid cross-correlation. Returns output of shape ``(N, O, Ho, Wo, To)``.

    A 4-D input is treated as a single sample and a 4-D result is returned.
    """
    x, squeeze = _as_batch(x)
    out_ext = _check_input(x, spec)
    weight = np.asarray(weight, dtype=DTYPE)
    if weight.shape != spec.weight_shape:
        raise DimensionError(f"weight shape {weight.shape} != {spec.weight_shape}")
    bias = np.asarray(bias, dtype=DTYPE)
    if bias.shape != (spec.out_channels,):
        raise DimensionError(f"bias shape {bias.shape} != ({spec.out_channels},)")

    n = x.shape[0]
    g = spec.groups
    og = spec.out_channels // g
    ho, wo, to = out_ext
    wmat = _grouped_weight(weight, spec)
    per_sample = ho * wo * to * spec.fan_in * g
    out = np.empty((n, spec.out_channels, ho, wo, to), dtype=DTYPE)
    for sl in _chunks(n, per_sample):
        nb = sl.stop - sl.start
        y = np.matmul(_im2col(x[sl], spec, out_ext), wmat)  # (G, M, Og)
        y = y.reshape(g, nb, ho, wo, to, og).transpose(1, 0, 5, 2, 3, 4)
        out[sl] = y.reshape(nb, spec.out_channels, ho, wo, to)
    out += bias[None, :, None, None, None]
    return out[0] if squeeze else out


def conv_backward(grad_out, x, spec: ConvSpec, weight, need_input_grad=True):
    """Gradients of :func:`conv_forward` w.r.t. input, weight and bias."""
    x, squeeze = _as_batch(x)
    out_ext = _check_input(x, spec)
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    if squeeze and grad_out.ndim == 4:
        grad_out = grad_out[None]
    expected = (x.shape[0], spec.out_channels, *out_ext)
    if grad_out.shape != expected:
        raise DimensionError(f"grad_out shape {grad_out.shape} != forward output {expected}")

    n = x.shape[0]
    g = spec.groups
    og = spec.out_channels // g
    cg = spec.in_channels // g
    ho, wo, to = out_ext
    kh, kw, kt = spec.kernel
    sh, sw, st = spec.stride
    wmat = _grouped_weight(weight, spec)

    grad_w = np.zeros((g, cg * kh * kw * kt, og), dtype=DTYPE)
    grad_b = grad_out.sum(axis=(0, 2, 3, 4))
    grad_x = np.zeros_like(x) if need_input_grad else None
    per_sample = ho * wo * to * spec.fan_in * g
    for sl in _chunks(n, per_sample):
        nb = sl.stop - sl.start
        dy = grad_out[sl].reshape(nb, g, og, ho, wo, to).transpose(1, 0, 3, 4, 5, 2)
        dy = dy.reshape(g, nb * ho * wo * to, og)
        grad_w += np.matmul(_im2col(x[sl], spec, out_ext).transpose(0, 2, 1), dy)
        if not need_input_grad:
            continue
        dcols = np.matmul(dy, wmat.transpose(0, 2, 1))
        dcols = dcols.reshape(g, nb, ho, wo, to, cg, kh, kw, kt)
        # (N, G, Cg, Ho, Wo, To, kh, kw, kt) so a tap slice lines up with x
        dcols = dcols.transpose(1, 0, 5, 2, 3, 4, 6, 7, 8).reshape(
            nb, spec.in_channels, ho, wo, to, kh, kw, kt
        )
        gx = grad_x[sl]
        for i in range(kh):
            for j in range(kw):
                for k in range(kt):
                    gx[
                        :,
                        :,
                        i : i + sh * (ho - 1) + 1 : sh,
                        j : j + sw * (wo - 1) + 1 : sw,
                        k : k + st * (to - 1) + 1 : st,
                    ] += dcols[..., i, j, k]

    grad_w = grad_w.transpose(0, 2, 1).reshape(spec.weight_shape)
    if grad_x is not None and squeeze:
        grad_x = grad_x[0]
    return grad_x, grad_w, grad_b


# -- batch normalization -------------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels):
        return cls(np.zeros(channels, dtype=DTYPE), np.ones(channels, dtype=DTYPE))

    def copy(self):
        return BatchNormState(self.mean.copy(), self.var.copy())


def _update_running(state, mean, var, count, momentum):
    if momentum == 1.0:
        state.mean[:] = mean
        state.var[:] = var
        return
    unbiased = var * count / (count - 1) if count > 1 else var
    state.mean *= 1 - momentum
    state.mean += momentum * mean
    state.var *= 1 - momentum
    state.var += momentum * unbiased


def _bn_axes(x):
    return (0,) + tuple(range(2, x.ndim))


def _bcast(v, ndim):
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batch_norm_forward(x, gamma, beta, state: BatchNormState, mode="train", momentum=BN_MOMENTUM):
    """Per-channel normalization over every axis but axis 1.

    In train mode the batch statistics are used and ``state`` is updated in
    place (momentum 0.1, unbiased running variance). ``momentum=1`` stores
    the batch statistics verbatim (biased variance), so a later eval pass on
    the same batch reproduces the train output. Eval mode reads ``state`` only.
    """
    x = np.asarray(x, dtype=DTYPE)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must have shape ({c},)")
    if state.mean.shape != (c,) or state.var.shape != (c,):
        raise DimensionError(f"running statistics do not match {c} channels")
    if mode == "train":
        axes = _bn_axes(x)
        count = x.size // c
        mean = x.mean(axis=axes)
        centered = x - _bcast(mean, x.ndim)
        var = np.mean(centered * centered, axis=axes)
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        x_hat = centered * _bcast(inv_std, x.ndim)
        _update_running(state, mean, var, count, momentum)
    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(state.var + BN_EPS)
        x_hat = (x - _bcast(state.mean, x.ndim)) * _bcast(inv_std, x.ndim)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    y = x_hat * _bcast(gamma, x.ndim) + _bcast(beta, x.ndim)
    return y, (x_hat, inv_std, gamma, mode)


def batch_norm_backward(grad_out, cache):
    x_hat, inv_std, gamma, mode = cache
    nd = grad_out.ndim
    axes = _bn_axes(grad_out)
    grad_gamma = np.sum(grad_out * x_hat, axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    dx_hat = grad_out * _bcast(gamma, nd)
    if mode == "eval":
        return dx_hat * _bcast(inv_std, nd), grad_gamma, grad_beta
    m = grad_out.size // grad_out.shape[1]
    # d/dx of (x - mean) / std with batch statistics
    mean_dxh = dx_hat.sum(axis=axes) / m
    mean_dxh_xh = np.sum(dx_hat * x_hat, axis=axes) / m
    grad_x = (dx_hat - _bcast(mean_dxh, nd) - x_hat * _bcast(mean_dxh_xh, nd)) * _bcast(inv_std, nd)
    return grad_x, grad_gamma, grad_beta


# -- fused batch norm + ELU ---------------------------------------------------
# Every BN in the network feeds an ELU; fusing them keeps the large encoder
# maps to two memory passes each way. Arrays are viewed as (N, C, S).


@njit(cache=True)
def _channel_stats(x):
    n, c, s = x.shape
    mean = np.zeros(c)
    var = np.zeros(c)
    count = n * s
    for ch in range(c):
        acc = 0.0
        for i in range(n):
            for j in range(s):
                acc += x[i, ch, j]
        m = acc / count
        acc = 0.0
        for i in range(n):
            for j in range(s):
                d = x[i, ch, j] - m
                acc += d * d
        mean[ch] = m
        var[ch] = acc / count
    return mean, var


@njit(cache=True)
def _bn_elu_apply(x, mean, inv_std, gamma, beta, x_hat, out):
    n, c, s = x.shape
    for i in range(n):
        for ch in range(c):
            m = mean[ch]
            k = inv_std[ch]
            g = gamma[ch]
            b = beta[ch]
            for j in range(s):
                xh = (x[i, ch, j] - m) * k
                x_hat[i, ch, j] = xh
                y = xh * g + b
                # exp(y) - 1 vectorises better than expm1 and is exact enough here
                out[i, ch, j] = y if y > 0.0 else math.exp(y) - 1.0


@njit(cache=True)
def _elu_bn_backward(d_out, out, x_hat, gamma, inv_std, batch_stats, d_x):
    n, c, s = d_out.shape
    d_gamma = np.zeros(c)
    d_beta = np.zeros(c)
    for ch in range(c):
        sb = 0.0
        sg = 0.0
        for i in range(n):
            for j in range(s):
                a = out[i, ch, j]
                dy = d_out[i, ch, j] * (1.0 if a > 0.0 else a + 1.0)
                sb += dy
                sg += dy * x_hat[i, ch, j]
        d_beta[ch] = sb
        d_gamma[ch] = sg
        scale = gamma[ch] * inv_std[ch]
        if batch_stats:
            mb = sb / (n * s)
            mg = sg / (n * s)
        else:
            mb = 0.0
            mg = 0.0
        for i in range(n):
            for j in range(s):
                a = out[i, ch, j]
                dy = d_out[i, ch, j] * (1.0 if a > 0.0 else a + 1.0)
                d_x[i, ch, j] = scale * (dy - mb - x_hat[i, ch, j] * mg)
    return d_gamma, d_beta


def _ncs(x):
    return np.ascontiguousarray(x, dtype=DTYPE).reshape(x.shape[0], x.shape[1], -1)


def bn_elu_forward(x, gamma, beta, state: BatchNormState, mode="train", momentum=BN_MOMENTUM):
    """``elu(batch_norm(x))`` in one fused pass; same semantics as the pair."""
    x3 = _ncs(x)
    c = x3.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must have shape ({c},)")
    if state.mean.shape != (c,):
        raise DimensionError(f"running statistics do not match {c} channels")
    if mode == "train":
        mean, var = _channel_stats(x3)
        count = x3.shape[0] * x3.shape[2]
        _update_running(state, mean, var, count, momentum)
    elif mode == "eval":
        mean, var = state.mean, state.var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    x_hat = np.empty_like(x3)
    out = np.empty_like(x3)
    _bn_elu_apply(x3, np.ascontiguousarray(mean), inv_std, np.ascontiguousarray(gamma, dtype=DTYPE),
                  np.ascontiguousarray(beta, dtype=DTYPE), x_hat, out)
    return out.reshape(x.shape), (x_hat, inv_std, gamma, mode, out)


def bn_elu_backward(grad_out, cache):
    x_hat, inv_std, gamma, mode, out = cache
    d_x = np.empty_like(x_hat)
    d_gamma, d_beta = _elu_bn_backward(
        _ncs(grad_out), out, x_hat, np.ascontiguousarray(gamma, dtype=DTYPE), inv_std, mode == "train", d_x
    )
    return d_x.reshape(grad_out.shape), d_gamma, d_beta


# -- pointwise -----------------------------------------------------------------


def elu(x):
    x = np.asarray(x, dtype=DTYPE)
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_backward(grad_out, y):
    """Backward from the forward *output* ``y`` (dy/dx = y + 1 where x <= 0)."""
    return grad_out * np.where(y > 0, 1.0, y + 1.0)


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out, y):
    return grad_out * y * (1.0 - y)


def softmax(scores, axis=-1):
    scores = np.asarray(scores, dtype=DTYPE)
    z = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# -- pooling -------------------------------------------------------------------


def avg_pool_time(x, window=2, stride=2):
    """Mean over windows of the last axis."""
    x = np.asarray(x, dtype=DTYPE)
    t = x.shape[-1]
    if window > t:
        raise DimensionError(f"axis T: window {window} exceeds extent {t}")
    n_out = (t - window) // stride + 1
    win = sliding_window_view(x, window, axis=-1)[..., : stride * (n_out - 1) + 1 : stride, :]
    return win.mean(axis=-1)


def avg_pool_time_backward(grad_out, t_in, window=2, stride=2):
    grad_x = np.zeros(grad_out.shape[:-1] + (t_in,), dtype=DTYPE)
    n_out = grad_out.shape[-1]
    share = grad_out / window
    for k in range(window):
        grad_x[..., k : k + stride * (n_out - 1) + 1 : stride] += share
    return grad_x


def global_avg_pool(x, channel_axis=1):
    """Mean over every axis after ``channel_axis``: (N, C, ...) -> (N, C)."""
    x = np.asarray(x, dtype=DTYPE)
    lead = x.shape[: channel_axis + 1]
    return x.reshape(lead + (-1,)).mean(axis=-1)


def global_avg_pool_backward(grad_out, in_shape):
    count = int(np.prod(in_shape[2:]))
    g = grad_out.reshape(grad_out.shape + (1,) * (len(in_shape) - 2))
    return np.broadcast_to(g / count, in_shape).copy()


# -- dense ---------------------------------------------------------------------


def dense(x, w, b):
    """``x @ w.T + b`` for a batch of row vectors (or a single vector)."""
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"dense: input length {x.shape[-1]} != W columns {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise DimensionError(f"dense: bias length {b.shape} != W rows {w.shape[0]}")
    return x @ w.T + b


def dense_backward(grad_out, x, w):
    grad_out = np.atleast_2d(grad_out)
    x2 = np.atleast_2d(x)
    return (grad_out @ w).reshape(np.shape(x)), grad_out.T @ x2, grad_out.sum(axis=0)


# -- loss ----------------------------------------------------------------------


def mse_pair_loss(r, same_class):
    """Squared distance of a relation score to the same-class indicator.

    Works elementwise on arrays; returns ``(loss, dloss/dr)``.
    """
    target = np.asarray(same_class, dtype=DTYPE)
    diff = np.asarray(r, dtype=DTYPE) - target
    return diff * diff, 2.0 * diff
