"""Non-uniform temporal aggregation: head split, projection maps, aggregation
and synchronisation of the uniform branch.

Shapes, for an input feature ``F`` of shape ``[N, C, T, H, W]`` and ``n`` heads:

* ``gamma(F)``                -> ``[N, n, T, (C/n)*H*W]``
* projection map ``M``        -> ``[N, n, T/2, T]``, each row a distribution
  over the ``T`` source steps
* aggregated feature          -> ``[N, C_out, T/2, H, W]``
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import BatchNormParams, Conv3dParams, ParamBag, batchnorm3d, conv3d, temporal_maxpool2
from .tensor import ShapeError, Tensor, add, matmul, mul, permute, reshape, softmax_lastdim, transpose_last


@dataclass(frozen=True)
class HeadLayout:
    heads: int
    channels: int

    def __post_init__(self):
        if self.heads < 1 or self.channels % self.heads:
            raise ShapeError(f"{self.heads} heads do not divide {self.channels} channels")

    @property
    def per_head_channels(self) -> int:
        return self.channels // self.heads


@dataclass(eq=False)
class ProjectionMap:
    values: Tensor  # [N, heads, T/2, T]

    @property
    def heads(self) -> int:
        return self.values.shape[1]

    @property
    def source_steps(self) -> int:
        return self.values.shape[3]

    def numpy(self) -> np.ndarray:
        return self.values.data


def gamma(x: Tensor, heads: int) -> Tensor:
    """Split channels into heads and flatten each head's (C/n, H, W) block per frame."""
    n, c, t, h, w = x.shape
    HeadLayout(heads, c)
    y = reshape(x, (n, heads, c // heads, t, h, w))
    y = permute(y, (0, 1, 3, 2, 4, 5))
    return reshape(y, (n, heads, t, (c // heads) * h * w))


def gamma_inverse(y: Tensor, channels: int, height: int, width: int) -> Tensor:
    n, heads, t, d = y.shape
    HeadLayout(heads, channels)
    if d != (channels // heads) * height * width:
        raise ShapeError(f"gamma_inverse: trailing extent {d} != (C/n)*H*W for C={channels}, "
                         f"H={height}, W={width}, n={heads}")
    x = reshape(y, (n, heads, t, channels // heads, height, width))
    x = permute(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (n, channels, t, height, width))


@dataclass(eq=False)
class NutaModuleParams:
    phi: Conv3dParams
    theta: Conv3dParams
    delta: Conv3dParams
    zeta: Conv3dParams
    compress: Conv3dParams  # 1x1x1, C -> C_out, trails the aggregation
    sync_compress: Conv3dParams  # 1x1x1, C -> C, trails the synchronisation
    layout: HeadLayout
    # optional output normalisation; the sync one starts at zero scale so the
    # synchronised feature is initially just the max-pooled residual
    out_bn: BatchNormParams | None = None
    sync_bn: BatchNormParams | None = None

    @classmethod
    def init(cls, channels, out_channels, heads, rng, groups=None, kernel=(3, 1, 1), dtype=np.float64,
             norm=False, uniform_start=False):
        """``uniform_start`` zero-initialises the key conv, so every map starts
        uniform (plain temporal averaging); keys still get gradient via the queries."""
        if groups is None or groups == 0:
            groups = default_groups(channels)
        layout = HeadLayout(heads, channels)

        def tconv(zero=False):
            return Conv3dParams.init(channels, channels, kernel, rng, groups=groups, dtype=dtype,
                                     temporal_pad="replicate", zero=zero)

        return cls(
            phi=tconv(), theta=tconv(uniform_start), delta=tconv(), zeta=tconv(),
            compress=Conv3dParams.init(channels, out_channels, 1, rng, dtype=dtype),
            sync_compress=Conv3dParams.init(channels, channels, 1, rng, dtype=dtype),
            layout=layout,
            out_bn=BatchNormParams.init(out_channels, dtype) if norm else None,
            sync_bn=BatchNormParams.init(channels, dtype, zero_scale=True) if norm else None,
        )

    @property
    def channels(self) -> int:
        return self.layout.channels

    @property
    def heads(self) -> int:
        return self.layout.heads

    def register(self, bag: ParamBag, prefix: str) -> None:
        for name in ("phi", "theta", "delta", "zeta", "compress", "sync_compress"):
            bag.add_conv(f"{prefix}.{name}", getattr(self, name))
        for name in ("out_bn", "sync_bn"):
            if getattr(self, name) is not None:
                bag.add_bn(f"{prefix}.{name}", getattr(self, name))


def default_groups(channels: int) -> int:
    """min(64, C), walked down to a divisor of C."""
    g = min(64, channels)
    while channels % g:
        g -= 1
    return g


def _check_input(f: Tensor, p: NutaModuleParams) -> None:
    if f.ndim != 5:
        raise ShapeError(f"expected [N, C, T, H, W], got {f.shape}")
    t = f.shape[2]
    if t < 2 or t % 2:
        raise ShapeError(f"temporal extent must be even and >= 2, got T={t}")
    if f.shape[1] != p.channels:
        raise ShapeError(f"feature has {f.shape[1]} channels, module expects {p.channels}")


def projection_logits(f: Tensor, p: NutaModuleParams) -> Tensor:
    _check_input(f, p)
    query = gamma(conv3d(temporal_maxpool2(f), p.phi), p.heads)  # [N, n, T/2, D]
    key = gamma(conv3d(f, p.theta), p.heads)  # [N, n, T, D]
    # 1/sqrt(D) keeps the logits O(1) as D = (C/n)*H*W grows
    return mul(matmul(query, transpose_last(key)), 1.0 / np.sqrt(key.shape[-1]))  # [N, n, T/2, T]


def projection_map(f: Tensor, p: NutaModuleParams, logit_bias=None) -> ProjectionMap:
    """Row-stochastic temporal map; ``logit_bias`` is added before the softmax
    (an injection point used to force specific maps)."""
    logits = projection_logits(f, p)
    if logit_bias is not None:
        logits = add(logits, Tensor(np.broadcast_to(logit_bias, logits.shape).astype(logits.dtype)))
    return ProjectionMap(softmax_lastdim(logits))


def _aggregate(m: ProjectionMap, value: Tensor) -> Tensor:
    n, c, t, h, w = value.shape
    if m.source_steps != t:
        raise ShapeError(f"projection map spans {m.source_steps} source steps, feature has T={t}")
    if m.values.shape[0] != n:
        raise ShapeError(f"projection map batch {m.values.shape[0]} != feature batch {n}")
    out = matmul(m.values, gamma(value, m.heads))  # [N, n, T/2, D]
    return gamma_inverse(out, c, h, w)


def nuta_forward(f: Tensor, p: NutaModuleParams, logit_bias=None, train_mode: bool = False):
    """Returns ``(F_nuta [N, C_out, T/2, H, W], M)``."""
    m = projection_map(f, p, logit_bias)
    agg = _aggregate(m, conv3d(f, p.delta))
    out = conv3d(agg, p.compress)
    if p.out_bn is not None:
        out = batchnorm3d(out, p.out_bn, train_mode)
    return out, m


def temporal_sync(f_res: Tensor, m: ProjectionMap, p: NutaModuleParams, train_mode: bool = False) -> Tensor:
    """Re-sample the uniform-branch feature onto the steps chosen by ``m``,
    plus a temporally max-pooled residual."""
    _check_input(f_res, p)
    if m.heads != p.heads:
        raise ShapeError(f"projection map has {m.heads} heads, module layout has {p.heads}")
    agg = conv3d(_aggregate(m, conv3d(f_res, p.zeta)), p.sync_compress)
    if p.sync_bn is not None:
        agg = batchnorm3d(agg, p.sync_bn, train_mode)
    return add(agg, temporal_maxpool2(f_res))
