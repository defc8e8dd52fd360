"""Two-branch network: a residual 3-D conv (uniform) branch and a chain of
NUTA modules (non-uniform branch) exchanging features at every NUTA stage.

Stages are numbered like ResNet stages: 1 is the stem, 2..5 are the residual
stages.  NUTA modules may sit on a suffix of {3, 4, 5}.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .core import NutaModuleParams, ProjectionMap, default_groups, gamma, gamma_inverse, nuta_forward, temporal_sync
from .nn import (
    BatchNormParams,
    Conv3dParams,
    LinearParams,
    ParamBag,
    batchnorm3d,
    conv3d,
    global_avgpool,
    linear,
    spatial_avgpool,
    spatial_avgpool2,
)
from .tensor import ShapeError, Tensor, add, concat, concat_channels, dropout, matmul, mul, relu, softmax_lastdim, transpose_last

FUSION_KINDS = ("nonlocal", "sum", "concat")
HEAD_FEATURES = ("both", "uniform")
BLOCK_KINDS = ("basic", "bottleneck")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StageConfig:
    blocks: int
    channels: int
    spatial_stride: int = 1
    temporal_stride: int = 1
    temporal_kernels: tuple = ()  # temporal extent of each block's first conv; empty -> all 3

    def temporal_kernel(self, block: int) -> int:
        return self.temporal_kernels[block] if self.temporal_kernels else 3


@dataclass
class NetworkConfig:
    name: str = "toy"
    in_channels: int = 3
    num_classes: int = 8
    stem_channels: int = 8
    stem_kernel: tuple = (3, 3, 3)
    stem_stride: tuple = (1, 2, 2)
    stem_pool: int = 1
    block: str = "basic"
    stages: tuple = (
        StageConfig(1, 8, 1),
        StageConfig(1, 16, 2),
        StageConfig(1, 32, 2),
        StageConfig(1, 64, 2),
    )
    nuta_stages: tuple = (4, 5)
    heads: tuple = (4,)
    groups: tuple = (0,)
    nuta_kernel_t: int = 3
    compress_ratio: float = 0.5
    fusion: str = "concat"
    head_features: str = "both"
    dropout_ratio: float = 0.6
    frames: int = 8
    size: int = 32

    # -- derived ------------------------------------------------------------
    def stage(self, number: int) -> StageConfig:
        return self.stages[number - 2]

    def stage_numbers(self) -> list:
        return list(range(2, 2 + len(self.stages)))

    def stage_input_channels(self, number: int) -> int:
        return self.stem_channels if number == 2 else self.stage(number - 1).channels

    def _per_nuta(self, values: tuple, number: int) -> int:
        if len(values) == 1:
            return values[0]
        return values[self.nuta_stages.index(number)]

    def heads_at(self, number: int) -> int:
        return self._per_nuta(self.heads, number)

    def groups_at(self, number: int) -> int:
        g = self._per_nuta(self.groups, number)
        return g if g > 0 else default_groups(self.stage(number).channels)

    def nuta_width(self, number: int) -> int:
        return max(1, int(round(self.stage(number).channels * self.compress_ratio)))

    def nuta_input_width(self, number: int) -> int:
        """Channels of the previous non-uniform feature entering stage ``number``."""
        if number == self.nuta_stages[0]:
            return self.stage_input_channels(number)
        return self.nuta_width(number - 1)

    def head_width(self) -> int:
        width = self.stages[-1].channels
        if self.nuta_stages and self.head_features == "both":
            width += self.nuta_width(self.nuta_stages[-1])
        return width

    # -- validation ---------------------------------------------------------
    def validate(self) -> "NetworkConfig":
        if self.fusion not in FUSION_KINDS:
            raise ConfigError(f"fusion must be one of {FUSION_KINDS}, got {self.fusion!r}")
        if self.head_features not in HEAD_FEATURES:
            raise ConfigError(f"head_features must be one of {HEAD_FEATURES}, got {self.head_features!r}")
        if self.block not in BLOCK_KINDS:
            raise ConfigError(f"block must be one of {BLOCK_KINDS}, got {self.block!r}")
        if len(self.stages) != 4:
            raise ConfigError(f"expected 4 residual stages (res2..res5), got {len(self.stages)}")
        if not 0.0 <= self.dropout_ratio < 1.0:
            raise ConfigError(f"dropout_ratio must be in [0, 1), got {self.dropout_ratio}")
        ns = tuple(self.nuta_stages)
        if ns:
            if ns != tuple(range(ns[0], 6)) or ns[0] < 3:
                raise ConfigError(f"nuta_stages must be a contiguous suffix of (3, 4, 5), got {ns}")
            for values, what in ((self.heads, "heads"), (self.groups, "groups")):
                if len(values) not in (1, len(ns)):
                    raise ConfigError(f"{what} needs 1 or {len(ns)} values, got {len(values)}")
            if self.stage(ns[0]).spatial_stride != 2:
                raise ConfigError(f"first NUTA stage res{ns[0]} must have spatial stride 2 so the "
                                  "spatially pooled seed feature matches it")
            for s in ns:
                c = self.stage(s).channels
                if c % self.heads_at(s):
                    raise ConfigError(f"res{s}: {self.heads_at(s)} heads do not divide {c} channels")
                if c % self.groups_at(s):
                    raise ConfigError(f"res{s}: {self.groups_at(s)} groups do not divide {c} channels")
        for i, st in enumerate(self.stages):
            if st.temporal_kernels and len(st.temporal_kernels) != st.blocks:
                raise ConfigError(f"res{i + 2}: {len(st.temporal_kernels)} temporal kernels for {st.blocks} blocks")
            if st.blocks < 1 or st.channels < 1:
                raise ConfigError(f"res{i + 2}: blocks and channels must be >= 1")
        self.check_input(self.frames, self.size, self.size)
        return self

    def check_input(self, t: int, h: int, w: int) -> None:
        """Divisibility of an input clip extent against strides and NUTA halvings."""
        tdiv = self.stem_stride[0] * int(np.prod([s.temporal_stride for s in self.stages]))
        tdiv *= 2 ** len(self.nuta_stages)
        if t % tdiv:
            raise ConfigError(f"T={t} is not divisible by {tdiv} (temporal strides x 2^{len(self.nuta_stages)})")
        sdiv = self.stem_stride[1] * self.stem_pool * int(np.prod([s.spatial_stride for s in self.stages]))
        for ext in (h, w):
            if ext % sdiv:
                raise ConfigError(f"spatial extent {ext} is not divisible by cumulative stride {sdiv}")

    # -- file format ----------------------------------------------------------
    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "NetworkConfig":
        values = parse_kv(text, source)
        unknown = set(values) - set(_SCHEMA)
        if unknown:
            raise ConfigError(f"{source}: unknown keys {sorted(unknown)}")
        kw = {}
        for key, raw in values.items():
            try:
                kw[key] = _SCHEMA[key][0](raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {key!r}: {raw!r} ({exc})") from None
        base = cls()
        stage_kw = {k: kw.pop(k) for k in list(kw) if k.startswith("stage_")}
        cfg = replace(base, **kw)
        if stage_kw:
            cfg = replace(cfg, stages=_stages_from(stage_kw, cfg.stages))
        return cfg.validate()

    @classmethod
    def from_file(cls, path) -> "NetworkConfig":
        path = Path(path)
        return cls.from_text(path.read_text(), str(path))

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "stages":
                continue
            lines.append(f"{f.name} = {_fmt(getattr(self, f.name))}")
        lines.append(f"stage_blocks = {_fmt(tuple(s.blocks for s in self.stages))}")
        lines.append(f"stage_channels = {_fmt(tuple(s.channels for s in self.stages))}")
        lines.append(f"stage_spatial_strides = {_fmt(tuple(s.spatial_stride for s in self.stages))}")
        lines.append(f"stage_temporal_strides = {_fmt(tuple(s.temporal_stride for s in self.stages))}")
        if any(s.temporal_kernels for s in self.stages):
            pattern = "/".join("".join(str(k) for k in s.temporal_kernels) or "-" for s in self.stages)
            lines.append(f"stage_temporal_kernels = {pattern}")
        return "\n".join(lines) + "\n"

    # -- presets ----------------------------------------------------------------
    @classmethod
    def toy(cls, **overrides) -> "NetworkConfig":
        return replace(cls(), **overrides).validate()

    @classmethod
    def micro(cls, **overrides) -> "NetworkConfig":
        """Smallest executable config (T=4, 8x8, widths <= 8)."""
        cfg = cls(
            name="micro", num_classes=3, stem_channels=2, stem_stride=(1, 1, 1),
            stages=(StageConfig(1, 2, 1), StageConfig(1, 4, 2), StageConfig(1, 4, 2), StageConfig(1, 8, 2)),
            nuta_stages=(4, 5), heads=(2,), groups=(2,), frames=4, size=8, dropout_ratio=0.0,
        )
        return replace(cfg, **overrides).validate()


def parse_kv(text: str, source: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; duplicates are errors."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _ints(raw: str) -> tuple:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(int(v) for v in raw.split(","))


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _kernels(raw: str) -> tuple:
    parts = raw.split("/")
    return tuple(() if p.strip() in ("", "-") else tuple(int(ch) for ch in p.strip()) for p in parts)


_SCHEMA = {
    "name": (str, "free-form label"),
    "in_channels": (int, "input colour channels"),
    "num_classes": (int, "classifier outputs"),
    "stem_channels": (int, "stem conv width"),
    "stem_kernel": (_ints, "stem kernel kT,kH,kW"),
    "stem_stride": (_ints, "stem stride sT,sH,sW"),
    "stem_pool": (int, "extra spatial average-pool factor after the stem (1 = none)"),
    "block": (str, "basic | bottleneck"),
    "stage_blocks": (_ints, "residual blocks per stage res2..res5"),
    "stage_channels": (_ints, "output width per stage res2..res5"),
    "stage_spatial_strides": (_ints, "spatial stride per stage"),
    "stage_temporal_strides": (_ints, "temporal stride per stage"),
    "stage_temporal_kernels": (_kernels, "per-block temporal kernels, stages separated by '/'"),
    "nuta_stages": (_ints, "stage numbers carrying NUTA modules, suffix of 3,4,5"),
    "heads": (_ints, "NUTA heads (one value or one per NUTA stage)"),
    "groups": (_ints, "NUTA conv groups (0 = min(64, C))"),
    "nuta_kernel_t": (int, "temporal kernel of the NUTA convs"),
    "compress_ratio": (float, "NUTA output width / stage width"),
    "fusion": (str, "concat | sum | nonlocal"),
    "head_features": (str, "both | uniform"),
    "dropout_ratio": (float, "dropout before the classifier"),
    "frames": (int, "clip length T"),
    "size": (int, "frame height = width"),
}


def schema_doc() -> str:
    return "\n".join(f"{k:24s} {doc}" for k, (_, doc) in _SCHEMA.items())


def _stages_from(kw: dict, default: tuple) -> tuple:
    blocks = kw.get("stage_blocks", tuple(s.blocks for s in default))
    chans = kw.get("stage_channels", tuple(s.channels for s in default))
    sstr = kw.get("stage_spatial_strides", tuple(s.spatial_stride for s in default))
    tstr = kw.get("stage_temporal_strides", tuple(s.temporal_stride for s in default))
    tk = kw.get("stage_temporal_kernels", tuple(() for _ in default))
    lens = {len(blocks), len(chans), len(sstr), len(tstr), len(tk)}
    if len(lens) != 1:
        raise ConfigError(f"stage_* lists disagree in length: {sorted(lens)}")
    return tuple(StageConfig(b, c, s, t, k) for b, c, s, t, k in zip(blocks, chans, sstr, tstr, tk))


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _block_forward(x: Tensor, bp: dict, train_mode: bool) -> Tensor:
    y = relu(batchnorm3d(conv3d(x, bp["a"]), bp["bn_a"], train_mode))
    y = batchnorm3d(conv3d(y, bp["b"]), bp["bn_b"], train_mode)
    if "c" in bp:
        y = batchnorm3d(conv3d(relu(y), bp["c"]), bp["bn_c"], train_mode)
    shortcut = x
    if "proj" in bp:
        shortcut = batchnorm3d(conv3d(x, bp["proj"]), bp["bn_proj"], train_mode)
    return relu(add(y, shortcut))


def residual_stage(x: Tensor, cfg: StageConfig, params: list, train_mode: bool) -> Tensor:
    """Run the blocks of one uniform-branch stage."""
    if len(params) != cfg.blocks:
        raise ShapeError(f"stage has {cfg.blocks} blocks but {len(params)} parameter sets")
    h, w = x.shape[3:]
    if h % cfg.spatial_stride or w % cfg.spatial_stride:
        raise ShapeError(f"spatial extents {(h, w)} underflow stride {cfg.spatial_stride}")
    for bp in params:
        x = _block_forward(x, bp, train_mode)
    return x


def init_nuta_feature(f_res: Tensor) -> Tensor:
    """Seed of the non-uniform branch: the uniform feature, spatially halved."""
    return spatial_avgpool2(f_res)


def init_fusion(kind: str, c_prev: int, c_res: int, heads: int, rng, dtype=np.float64, zero=False,
                norm=False) -> dict:
    """Fusion parameters.  With ``norm`` a batch norm follows the last conv; for
    the residual kinds (sum, nonlocal) it starts at zero scale, so the fused
    feature is initially the uniform one."""
    def pw(cin, cout, z=zero):
        return Conv3dParams.init(cin, cout, 1, rng, dtype=dtype, zero=z)

    if kind == "concat":
        out = {"mix": pw(c_res + c_prev, c_res)}
    elif kind == "sum":
        out = {"lift": pw(c_prev, c_res)}
    elif kind == "nonlocal":
        if c_res % heads:
            raise ConfigError(f"{heads} heads do not divide {c_res} channels")
        out = {"query": pw(c_prev, c_res, False), "key": pw(c_res, c_res, False),
               "value": pw(c_res, c_res, False), "out": pw(c_res, c_res)}
    else:
        raise ConfigError(f"unknown fusion kind {kind!r}")
    if norm:
        out["bn"] = BatchNormParams.init(c_res, dtype, zero_scale=kind != "concat")
    return out


def reconcile_spatial(f_prev: Tensor, f_res: Tensor) -> Tensor:
    """Average-pool the non-uniform feature down to the uniform feature's H, W."""
    (hp, wp), (hr, wr) = f_prev.shape[3:], f_res.shape[3:]
    if hp % hr or wp % wr or hp // hr != wp // wr:
        raise ShapeError(f"cannot pool spatial extents {(hp, wp)} to {(hr, wr)}")
    return spatial_avgpool(f_prev, hp // hr)


def nonlocal_attend(f_prev: Tensor, f_res: Tensor, params: dict, heads: int) -> Tensor:
    """Temporal cross-attention: non-uniform feature queries the uniform one."""
    c, h, w = f_res.shape[1], f_res.shape[3], f_res.shape[4]
    q = gamma(conv3d(f_prev, params["query"]), heads)
    k = gamma(conv3d(f_res, params["key"]), heads)
    v = gamma(conv3d(f_res, params["value"]), heads)
    att = softmax_lastdim(mul(matmul(q, transpose_last(k)), 1.0 / np.sqrt(k.shape[-1])))
    return gamma_inverse(matmul(att, v), c, h, w)


def _maybe_bn(x: Tensor, params: dict, train_mode: bool) -> Tensor:
    return batchnorm3d(x, params["bn"], train_mode) if "bn" in params else x


def fuse(f_prev: Tensor, f_res: Tensor, kind: str, params: dict, heads: int = 1, train_mode: bool = False) -> Tensor:
    """Combine the previous non-uniform feature with the current uniform one."""
    if f_prev.shape[2] != f_res.shape[2]:
        raise ShapeError(f"temporal mismatch at fusion: non-uniform T={f_prev.shape[2]} vs uniform "
                         f"T={f_res.shape[2]} (synchronisation bug upstream)")
    f_prev = reconcile_spatial(f_prev, f_res)
    if kind == "concat":
        return _maybe_bn(conv3d(concat_channels(f_res, f_prev), params["mix"]), params, train_mode)
    if kind == "sum":
        return add(f_res, _maybe_bn(conv3d(f_prev, params["lift"]), params, train_mode))
    if kind == "nonlocal":
        attended = conv3d(nonlocal_attend(f_prev, f_res, params, heads), params["out"])
        return add(f_res, _maybe_bn(attended, params, train_mode))
    raise ConfigError(f"unknown fusion kind {kind!r}")


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------

@dataclass
class ForwardInfo:
    maps: dict = field(default_factory=dict)  # stage -> ProjectionMap
    uniform_t: list = field(default_factory=list)  # (stage, T) after each stage
    nuta_t: list = field(default_factory=list)  # (stage, T) of each NUTA output
    head_input: Tensor | None = None


class TwoBranchNet:
    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator, dtype=np.float64):
        self.cfg = cfg.validate()
        self.dtype = dtype
        self.params = ParamBag()
        bag = self.params
        self.stem = {
            "conv": bag.add_conv("stem.conv", Conv3dParams.init(cfg.in_channels, cfg.stem_channels,
                                                                 cfg.stem_kernel, rng, stride=cfg.stem_stride,
                                                                 dtype=dtype, temporal_pad="replicate")),
            "bn": bag.add_bn("stem.bn", BatchNormParams.init(cfg.stem_channels, dtype)),
        }
        self.stages = {}
        for number in cfg.stage_numbers():
            blocks = self.init_stage(cfg.stage(number), cfg.stage_input_channels(number), rng, cfg.block, dtype)
            for i, bp in enumerate(blocks):
                for key, p in bp.items():
                    name = f"res{number}.{i}.{key}"
                    (bag.add_bn if key.startswith("bn") else bag.add_conv)(name, p)
            self.stages[number] = blocks
        self.nuta = {}
        self.fusion = {}
        for number in cfg.nuta_stages:
            c = cfg.stage(number).channels
            mod = NutaModuleParams.init(c, cfg.nuta_width(number), cfg.heads_at(number), rng,
                                        groups=cfg.groups_at(number), kernel=(cfg.nuta_kernel_t, 1, 1), dtype=dtype,
                                        norm=True, uniform_start=True)
            mod.register(bag, f"nuta{number}")
            self.nuta[number] = mod
            fp = init_fusion(cfg.fusion, cfg.nuta_input_width(number), c, cfg.heads_at(number), rng, dtype,
                             norm=True)
            for key, p in fp.items():
                (bag.add_bn if key == "bn" else bag.add_conv)(f"fuse{number}.{key}", p)
            self.fusion[number] = fp
        self.head = bag.add_linear("head", LinearParams.init(cfg.head_width(), cfg.num_classes, rng, dtype))

    @staticmethod
    def init_stage(cfg: StageConfig, cin: int, rng, block: str = "basic", dtype=np.float64) -> list:
        blocks = []
        for i in range(cfg.blocks):
            first = i == 0
            s = cfg.spatial_stride if first else 1
            ts = cfg.temporal_stride if first else 1
            kt = cfg.temporal_kernel(i)
            inner = cfg.channels // 4 if block == "bottleneck" else cfg.channels
            bin_ = cin if first else cfg.channels
            bp = {
                "a": Conv3dParams.init(bin_, inner, (kt, 1, 1), rng, stride=(ts, 1, 1), dtype=dtype,
                                       temporal_pad="replicate"),
                "bn_a": BatchNormParams.init(inner, dtype),
                "b": Conv3dParams.init(inner, inner, (1, 3, 3), rng, stride=(1, s, s), dtype=dtype),
                "bn_b": BatchNormParams.init(inner, dtype),
            }
            if block == "bottleneck":
                bp["c"] = Conv3dParams.init(inner, cfg.channels, 1, rng, dtype=dtype)
                bp["bn_c"] = BatchNormParams.init(cfg.channels, dtype)
            if bin_ != cfg.channels or s != 1 or ts != 1:
                bp["proj"] = Conv3dParams.init(bin_, cfg.channels, 1, rng, stride=(ts, s, s), dtype=dtype)
                bp["bn_proj"] = BatchNormParams.init(cfg.channels, dtype)
            blocks.append(bp)
        return blocks

    # -- parameters -------------------------------------------------------------
    def parameters(self) -> list:
        return list(self.params.tensors.values())

    def zero_grad(self) -> None:
        for t in self.params.tensors.values():
            t.grad = None

    def state_dict(self) -> dict:
        out = {k: t.data.copy() for k, t in self.params.tensors.items()}
        out.update({k: v.copy() for k, v in self.params.buffers.items()})
        return out

    def load_state_dict(self, state: dict) -> None:
        expected = set(self.params.tensors) | set(self.params.buffers)
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, t in self.params.tensors.items():
            t.data[...] = state[k]
        for k, v in self.params.buffers.items():
            v[...] = state[k]

    def save(self, path) -> None:
        np.savez(path, **self.state_dict())

    def load(self, path) -> None:
        with np.load(path) as z:
            self.load_state_dict({k: z[k] for k in z.files})

    # -- forward ------------------------------------------------------------------
    def forward(self, clip: Tensor, train_mode: bool = False, rng=None, info: ForwardInfo | None = None) -> Tensor:
        cfg = self.cfg
        if clip.ndim != 5 or clip.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected clip [N, {cfg.in_channels}, T, H, W], got {clip.shape}")
        cfg.check_input(*clip.shape[2:])
        if clip.dtype != self.dtype and not clip.requires_grad:
            clip = Tensor(clip.data.astype(self.dtype))
        info = info if info is not None else ForwardInfo()

        x = relu(batchnorm3d(conv3d(clip, self.stem["conv"]), self.stem["bn"], train_mode))
        if cfg.stem_pool > 1:
            x = spatial_avgpool(x, cfg.stem_pool)
        info.uniform_t.append((1, x.shape[2]))
        f_nuta = None
        for number in cfg.stage_numbers():
            x_in = x
            x = residual_stage(x, cfg.stage(number), self.stages[number], train_mode)
            if number in self.nuta:
                if f_nuta is None:
                    f_nuta = init_nuta_feature(x_in)
                fused = fuse(f_nuta, x, cfg.fusion, self.fusion[number], cfg.heads_at(number), train_mode)
                f_nuta, m = nuta_forward(fused, self.nuta[number], train_mode=train_mode)
                x = temporal_sync(x, m, self.nuta[number], train_mode)
                info.maps[number] = m
                info.nuta_t.append((number, f_nuta.shape[2]))
            info.uniform_t.append((number, x.shape[2]))

        feats = global_avgpool(x)
        if f_nuta is not None and cfg.head_features == "both":
            feats = concat([feats, global_avgpool(f_nuta)], axis=1)
        info.head_input = feats
        feats = dropout(feats, cfg.dropout_ratio, train_mode, rng)
        return linear(feats, self.head)

    __call__ = forward


def forward(clip: Tensor, cfg: NetworkConfig, params: TwoBranchNet, train_mode: bool = False, rng=None) -> Tensor:
    if params.cfg is not cfg and params.cfg != cfg:
        raise ConfigError("parameters were built for a different config")
    return params.forward(clip, train_mode, rng)


def classify_from(net: TwoBranchNet, clip: Tensor, variant: str, train_mode: bool = False, rng=None) -> Tensor:
    """Logits with the head reading ``both`` branches or the ``uniform`` one only.

    The variant network shares every trunk parameter with ``net``; only the
    classifier differs in input width.  Its head is created lazily and cached.
    """
    if variant not in ("uniform-features-only", "both-branches"):
        raise ValueError(f"unknown variant {variant!r}")
    want = "uniform" if variant == "uniform-features-only" else "both"
    if net.cfg.head_features == want:
        return net.forward(clip, train_mode, rng)
    cache = getattr(net, "_variant_heads", None)
    if cache is None:
        cache = net._variant_heads = {}
    if want not in cache:
        cfg = replace(net.cfg, head_features=want)
        cache[want] = LinearParams.init(cfg.head_width(), cfg.num_classes, np.random.default_rng(0), net.dtype)
    saved_head, saved_cfg = net.head, net.cfg
    net.head, net.cfg = cache[want], replace(net.cfg, head_features=want)
    try:
        return net.forward(clip, train_mode, rng)
    finally:
        net.head, net.cfg = saved_head, saved_cfg
