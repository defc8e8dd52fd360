"""Neural operators shared by both branches.

All spatio-temporal tensors use the ``[N, C, T, H, W]`` layout.  Convolution
is cross-correlation (no kernel flip) lowered to a grouped batched matmul
over volume columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .tensor import (
    ShapeError,
    Tensor,
    _charge,
    _record,
    add,
    gather_rows,
    log_softmax_lastdim,
    matmul,
    mean_lastdims,
    mul,
    sum_all,
)


def _triple(v) -> tuple:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


@dataclass(eq=False)
class Conv3dParams:
    weight: Tensor  # [Cout, Cin/groups, kT, kH, kW]
    bias: Tensor | None = None
    stride: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)
    groups: int = 1
    temporal_pad: str = "zeros"  # or "replicate": edge frames are repeated

    @classmethod
    def init(cls, cin, cout, kernel, rng, stride=1, padding="same", groups=1, bias=False,
             dtype=np.float64, zero=False, temporal_pad="zeros"):
        """Kaiming-normal (fan-in) initialisation."""
        kernel, stride = _triple(kernel), _triple(stride)
        if cin % groups or cout % groups:
            raise ValueError(f"groups={groups} must divide Cin={cin} and Cout={cout}")
        if padding == "same":
            if any(k % 2 == 0 for k in kernel):
                raise ValueError(f"'same' padding needs odd kernel extents, got {kernel}")
            padding = tuple(k // 2 for k in kernel)
        shape = (cout, cin // groups) + kernel
        if zero:
            w = np.zeros(shape, dtype=dtype)
        else:
            fan_in = (cin // groups) * int(np.prod(kernel))
            w = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None
        return cls(Tensor(w, requires_grad=True), b, stride, _triple(padding), groups, temporal_pad)

    @property
    def kernel(self) -> tuple:
        return tuple(self.weight.shape[2:])

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def output_extents(self, t, h, w) -> tuple:
        out = []
        for size, k, s, p in zip((t, h, w), self.kernel, self.stride, self.padding):
            out.append((size + 2 * p - k) // s + 1)
        return tuple(out)

    def parameters(self) -> list:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


def conv3d(x: Tensor, p: Conv3dParams) -> Tensor:
    """Grouped 3-D cross-correlation plus optional bias."""
    if x.ndim != 5:
        raise ShapeError(f"conv3d expects [N, C, T, H, W], got {x.shape}")
    n, cin, t, h, w = x.shape
    g = p.groups
    cout = p.out_channels
    if cin % g or cout % g:
        raise ShapeError(f"conv3d: groups={g} must divide Cin={cin} and Cout={cout}")
    if cin != p.in_channels:
        raise ShapeError(f"conv3d: input has {cin} channels, weight {p.weight.shape} expects {p.in_channels}")
    to, ho, wo = p.output_extents(t, h, w)
    if min(to, ho, wo) < 1:
        raise ShapeError(f"conv3d: output extent {(to, ho, wo)} < 1 for input {x.shape}")
    kt, kh, kw = p.kernel
    ksize = kt * kh * kw
    npos = to * ho * wo

    pointwise = p.kernel == (1, 1, 1) and p.stride == (1, 1, 1) and p.padding == (0, 0, 0)
    pt, ph, pw = p.padding
    padded_shape = (n, cin, t + 2 * pt, h + 2 * ph, w + 2 * pw)
    if pointwise:
        cols = x.data.reshape(n, g, cin // g, npos)
    else:
        xp = x.data
        if p.temporal_pad == "replicate" and pt:
            xp = np.pad(xp, ((0, 0), (0, 0), (pt, pt), (0, 0), (0, 0)), mode="edge")
            if ph or pw:
                xp = np.pad(xp, ((0, 0), (0, 0), (0, 0), (ph, ph), (pw, pw)))
        elif any(p.padding):
            xp = np.pad(xp, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
        cols = _accel.vol2col(xp, p.kernel, p.stride, (to, ho, wo))
        cols = cols.reshape(n, g, (cin // g) * ksize, npos)
    wmat = p.weight.data.reshape(g, cout // g, (cin // g) * ksize)
    # charged from the operands actually multiplied: batch x rows x inner x cols
    _charge("conv", cols.shape[0] * wmat.shape[0] * wmat.shape[1] * wmat.shape[2] * cols.shape[-1])
    out = np.matmul(wmat, cols).reshape(n, cout, to, ho, wo)
    if p.bias is not None:
        out = out + p.bias.data.reshape(1, cout, 1, 1, 1)

    parents = (x, p.weight) + ((p.bias,) if p.bias is not None else ())

    def bw(grad):
        gm = grad.reshape(n, g, cout // g, npos)
        gx = gw = gb = None
        if p.weight.requires_grad:
            gw = np.matmul(gm, cols.swapaxes(-1, -2)).sum(axis=0).reshape(p.weight.shape)
        if x.requires_grad:
            gcols = np.matmul(wmat.swapaxes(-1, -2), gm)
            if pointwise:
                gx = gcols.reshape(x.shape)
            else:
                gcols = gcols.reshape(n, cin, kt, kh, kw, to, ho, wo)
                gxp = _accel.col2vol(gcols, padded_shape, p.stride)
                gxp = gxp[:, :, :, ph : ph + h, pw : pw + w]
                gx = np.ascontiguousarray(gxp[:, :, pt : pt + t])
                if p.temporal_pad == "replicate" and pt:
                    gx[:, :, 0] += gxp[:, :, :pt].sum(axis=2)
                    gx[:, :, t - 1] += gxp[:, :, pt + t :].sum(axis=2)
        if p.bias is not None:
            gb = grad.sum(axis=(0, 2, 3, 4))
        return (gx, gw) + ((gb,) if p.bias is not None else ())

    return _record(out, parents, bw, "conv3d")


def temporal_maxpool2(x: Tensor) -> Tensor:
    """Max over non-overlapping frame pairs; ties route to the earlier frame."""
    if x.ndim != 5:
        raise ShapeError(f"temporal_maxpool2 expects [N, C, T, H, W], got {x.shape}")
    if x.shape[2] < 2 or x.shape[2] % 2:
        raise ShapeError(f"temporal_maxpool2 needs an even temporal extent >= 2, got T={x.shape[2]}")
    out, pick = _accel.tmax2_forward(x.data)
    return _record(out, (x,), lambda g: (_accel.tmax2_backward(g, pick),), "temporal_maxpool2")


def spatial_avgpool(x: Tensor, factor: int) -> Tensor:
    """Mean over non-overlapping ``factor x factor`` spatial windows."""
    if x.ndim != 5:
        raise ShapeError(f"spatial_avgpool expects [N, C, T, H, W], got {x.shape}")
    n, c, t, h, w = x.shape
    if factor == 1:
        return x
    if h % factor or w % factor:
        raise ShapeError(f"spatial_avgpool: H={h}, W={w} not divisible by {factor}")
    v = x.data.reshape(n, c, t, h // factor, factor, w // factor, factor)
    acc = v[:, :, :, :, 0, :, 0].copy()
    for i in range(factor):
        for j in range(factor):
            if i or j:
                acc += v[:, :, :, :, i, :, j]
    area = factor * factor
    out = acc / area

    def bw(g):
        gx = np.broadcast_to((g / area)[:, :, :, :, None, :, None],
                             (n, c, t, h // factor, factor, w // factor, factor))
        return (np.ascontiguousarray(gx).reshape(x.shape),)

    return _record(out, (x,), bw, "spatial_avgpool")


def spatial_avgpool2(x: Tensor) -> Tensor:
    return spatial_avgpool(x, 2)


def global_avgpool(x: Tensor) -> Tensor:
    """[N, C, T, H, W] -> [N, C]."""
    return mean_lastdims(x, 3)


@dataclass(eq=False)
class BatchNormParams:
    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def init(cls, channels, dtype=np.float64, zero_scale=False):
        scale = np.zeros(channels, dtype) if zero_scale else np.ones(channels, dtype)
        return cls(Tensor(scale, requires_grad=True), Tensor(np.zeros(channels, dtype), requires_grad=True),
                   np.zeros(channels, dtype), np.ones(channels, dtype))

    def parameters(self) -> list:
        return [self.scale, self.shift]


def batchnorm3d(x: Tensor, p: BatchNormParams, train_mode: bool) -> Tensor:
    c = x.shape[1]
    if c != p.scale.shape[0]:
        raise ShapeError(f"batchnorm3d: input has {c} channels, params have {p.scale.shape[0]}")
    bshape = (1, c, 1, 1, 1)
    gamma = p.scale.data.reshape(bshape)
    beta = p.shift.data.reshape(bshape)
    if not train_mode:
        inv = 1.0 / np.sqrt(p.running_var.reshape(bshape) + p.eps)
        xhat = (x.data - p.running_mean.reshape(bshape)) * inv
        out = (gamma * xhat + beta).astype(x.dtype, copy=False)

        def bw_eval(g):
            return g * gamma * inv, (g * xhat).sum(axis=(0, 2, 3, 4)), g.sum(axis=(0, 2, 3, 4))

        return _record(out, (x, p.scale, p.shift), bw_eval, "batchnorm3d")

    axes = (0, 2, 3, 4)
    m = x.size // c
    mean = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mean
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = xc * inv
    out = gamma * xhat + beta
    mom = p.momentum
    unbiased = var.reshape(c) * (m / max(m - 1, 1))
    p.running_mean[...] = (1 - mom) * p.running_mean + mom * mean.reshape(c)
    p.running_var[...] = (1 - mom) * p.running_var + mom * unbiased

    def bw(g):
        gsc = (g * xhat).sum(axis=axes)
        gsh = g.sum(axis=axes)
        gxhat = g * gamma
        gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        return gx, gsc, gsh

    return _record(out, (x, p.scale, p.shift), bw, "batchnorm3d")


@dataclass(eq=False)
class LinearParams:
    weight: Tensor  # [D, K]
    bias: Tensor

    @classmethod
    def init(cls, din, dout, rng, dtype=np.float64):
        bound = 1.0 / np.sqrt(din)
        w = rng.uniform(-bound, bound, (din, dout)).astype(dtype)
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(dout, dtype), requires_grad=True))

    def parameters(self) -> list:
        return [self.weight, self.bias]


def linear(x: Tensor, p: LinearParams) -> Tensor:
    if x.ndim != 2 or x.shape[1] != p.weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {p.weight.shape}")
    return add(matmul(x, p.weight), p.bias)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true class."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"cross_entropy: labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    picked = gather_rows(log_softmax_lastdim(logits), labels)
    return mul(sum_all(picked), -1.0 / n)


@dataclass(eq=False)
class ParamBag:
    """Flat ordered registry of named trainable tensors and batch-norm buffers."""

    tensors: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def add_conv(self, name: str, p: Conv3dParams) -> Conv3dParams:
        self.tensors[f"{name}.weight"] = p.weight
        if p.bias is not None:
            self.tensors[f"{name}.bias"] = p.bias
        return p

    def add_bn(self, name: str, p: BatchNormParams) -> BatchNormParams:
        self.tensors[f"{name}.scale"] = p.scale
        self.tensors[f"{name}.shift"] = p.shift
        self.buffers[f"{name}.running_mean"] = p.running_mean
        self.buffers[f"{name}.running_var"] = p.running_var
        return p

    def add_linear(self, name: str, p: LinearParams) -> LinearParams:
        self.tensors[f"{name}.weight"] = p.weight
        self.tensors[f"{name}.bias"] = p.bias
        return p
