"""Property checks over the whole stack, shared by the CLI and the acceptance
tests.  Each check returns an :class:`Invariant` with a one-line detail."""

from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import CONFIG_DIR
from .core import NutaModuleParams, gamma, gamma_inverse, projection_map
from .flops import count_flops
from .network import ForwardInfo, NetworkConfig, TwoBranchNet
from .tensor import Tensor, count_macs
from .viz import export_heatmap, read_text_grid


@dataclass
class Invariant:
    name: str
    ok: bool
    detail: str


def projection_normalization(trials: int = 1000, seed: int = 0, tol: float = 1e-6) -> Invariant:
    """Rows of random maps are distributions; constant input gives 1/T."""
    rng = np.random.default_rng(seed)
    worst_row, lo, hi, worst_const = 0.0, 1.0, 0.0, 0.0
    for i in range(trials):
        t = int(rng.choice([4, 6, 8]))
        heads = int(rng.choice([1, 2, 4]))
        c = heads * int(rng.integers(1, 3))
        m = NutaModuleParams.init(c, c, heads, rng, groups=int(rng.choice([1, c])))
        f = rng.standard_normal((2, c, t, 2, 2)) * rng.uniform(0.1, 5.0)
        v = projection_map(Tensor(f), m).numpy()
        worst_row = max(worst_row, float(np.abs(v.sum(-1) - 1.0).max()))
        lo, hi = min(lo, float(v.min())), max(hi, float(v.max()))
        if i % 10 == 0:
            const = projection_map(Tensor(np.full((1, c, t, 2, 2), rng.uniform(-3, 3))), m).numpy()
            worst_const = max(worst_const, float(np.abs(const - 1.0 / t).max()))
    ok = worst_row < tol and lo >= 0.0 and hi <= 1.0 and worst_const < tol
    return Invariant("projection_normalization", ok,
                     f"{trials} maps: max |row sum - 1| = {worst_row:.2e}, entries in [{lo:.3g}, {hi:.3g}], "
                     f"constant-input max |M - 1/T| = {worst_const:.2e}")


def gamma_round_trip(trials: int = 50, seed: int = 0) -> Invariant:
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        heads = int(rng.choice([1, 2, 4]))
        c, t, h, w = heads * int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = rng.standard_normal((2, c, t, h, w))
        if gamma_inverse(gamma(Tensor(x), heads), c, h, w).data.tobytes() != x.tobytes():
            return Invariant("gamma_round_trip", False, f"mismatch for C={c}, heads={heads}")
    return Invariant("gamma_round_trip", True, f"{trials} random shapes bit-exact")


def shipped_configs() -> list:
    return sorted(CONFIG_DIR.glob("*.cfg"))


def _executable(cfg: NetworkConfig) -> bool:
    return cfg.size <= 64 and max(s.channels for s in cfg.stages) <= 256


def shape_contract(cfg: NetworkConfig) -> Invariant:
    """Each NUTA stage halves T, both branches agree after every sync, and the
    final extent is T / (temporal strides) / 2^|nuta_stages|."""
    t_div = cfg.stem_stride[0]
    for s in cfg.stages:
        t_div *= s.temporal_stride
    expected_final = cfg.frames // t_div // 2 ** len(cfg.nuta_stages)
    if _executable(cfg):
        info = ForwardInfo()
        net = TwoBranchNet(cfg, np.random.default_rng(0))
        net.forward(Tensor(np.random.default_rng(1).random((1, cfg.in_channels, cfg.frames, cfg.size, cfg.size))),
                    info=info)
        uniform = dict(info.uniform_t)
        nuta = dict(info.nuta_t)
        how = "executed"
    else:
        rep = count_flops(cfg, (1, cfg.in_channels, cfg.frames, cfg.size, cfg.size))
        shapes = {l.name: l.out_shape for l in rep.layers}
        uniform, nuta = {}, {}
        for n in cfg.stage_numbers():
            last = f"res{n}.{cfg.stage(n).blocks - 1}.{'c' if cfg.block == 'bottleneck' else 'b'}"
            uniform[n] = shapes[last][2]
            if n in cfg.nuta_stages:
                uniform[n] = shapes[f"nuta{n}.sync_compress"][2]
                nuta[n] = shapes[f"nuta{n}.compress"][2]
        how = "shape walk"
    problems = []
    prev_t = None
    for n in cfg.stage_numbers():
        if n in nuta:
            if nuta[n] != uniform[n]:
                problems.append(f"res{n}: branches at T={uniform[n]} vs {nuta[n]}")
            if prev_t is not None and cfg.stage(n).temporal_stride == 1 and uniform[n] * 2 != prev_t:
                problems.append(f"res{n}: NUTA did not halve T ({prev_t} -> {uniform[n]})")
        prev_t = uniform[n]
    final = uniform[cfg.stage_numbers()[-1]]
    if final != expected_final:
        problems.append(f"final T={final}, expected {expected_final}")
    trace = " ".join(f"res{n}:{uniform[n]}" for n in cfg.stage_numbers())
    return Invariant(f"shape_contract[{cfg.name}]", not problems,
                     "; ".join(problems) or f"{how}, T={cfg.frames} -> {trace}")


def flop_oracle(cfg: NetworkConfig, batch: int = 2) -> Invariant:
    """Analytic count equals the MACs counted inside the executed kernels."""
    net = TwoBranchNet(cfg, np.random.default_rng(0))
    shape = (batch, cfg.in_channels, cfg.frames, cfg.size, cfg.size)
    with count_macs() as counted:
        net.forward(Tensor(np.random.default_rng(1).random(shape)))
    rep = count_flops(cfg, shape)
    ok = sum(counted.values()) == rep.total_macs and counted == rep.by_kind()
    return Invariant(f"flop_oracle[{cfg.name}]", ok,
                     f"instrumented {sum(counted.values())} vs analytic {rep.total_macs} MACs")


def heatmap_round_trip(seed: int = 0) -> Invariant:
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((1, 3, 4, 8)) * 3
    m = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    with tempfile.TemporaryDirectory() as d:
        exports = export_heatmap(m, "probe", d)
        ok = all(read_text_grid(e.text_path).tobytes() == m[0, e.head].tobytes() for e in exports)
    return Invariant("heatmap_round_trip", ok, f"{len(exports)} heads {'bit-exact' if ok else 'MISMATCH'}")


def run_all(trials: int = 1000, progress=None) -> list:
    results = []

    def add(r):
        results.append(r)
        if progress is not None:
            progress(r)

    add(projection_normalization(trials))
    add(gamma_round_trip())
    for path in shipped_configs():
        cfg = NetworkConfig.from_file(path)
        add(shape_contract(cfg))
        if _executable(cfg):
            add(flop_oracle(cfg))
    add(heatmap_round_trip())
    return results
