"""Central finite-difference verification of tape gradients.

The error for one input tensor is ``max|a - n| / max(max|a|, max|n|)`` over
the sampled coordinates, where ``a`` is the tape gradient and ``n`` the
central difference.  When both gradients vanish (scale below 1e-8) the
absolute error is reported instead.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, mul, sum_all

EPS = 1e-5
TOL = 1e-4
TOL_NETWORK = 1e-3


@dataclass
class CheckResult:
    name: str
    worst: float
    per_input: dict
    tol: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.worst < self.tol


def _scalarize(out: Tensor, proj: np.ndarray) -> Tensor:
    return sum_all(mul(out, Tensor(proj)))


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], rng: np.random.Generator,
                    eps: float = EPS, coords: int = 20, names: Sequence[str] | None = None) -> dict:
    """Compare tape and finite-difference gradients of ``fn`` w.r.t. ``inputs``.

    ``fn`` must be deterministic (re-seed any rng it uses on every call).
    Returns ``{name: relative_error}``.
    """
    out = fn()
    proj = rng.standard_normal(out.shape)
    for t in inputs:
        t.grad = None
    backward(_scalarize(out, proj))
    names = names or [t.name or f"input{i}" for i, t in enumerate(inputs)]
    errors = {}
    for name, t in zip(names, inputs):
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        k = min(coords, flat.size)
        idx = rng.choice(flat.size, size=k, replace=False)
        a = analytic.reshape(-1)[idx]
        num = np.empty(k)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float((fn().data * proj).sum())
            flat[i] = orig - eps
            fm = float((fn().data * proj).sum())
            flat[i] = orig
            num[j] = (fp - fm) / (2 * eps)
        scale = max(np.abs(a).max(), np.abs(num).max())
        diff = np.abs(a - num).max()
        errors[name] = float(diff / scale) if scale > 1e-8 else float(diff)
    return errors


def run_check(name: str, fn, inputs, rng, tol=TOL, coords=20, names=None) -> CheckResult:
    start = time.perf_counter()
    per = check_gradients(fn, inputs, rng, coords=coords, names=names)
    return CheckResult(name, max(per.values()), per, tol, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# the full operator suite
# ---------------------------------------------------------------------------

def _t(rng, *shape, scale=1.0, name=None):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, name=name)


def suite_cases(rng: np.random.Generator):
    """Yield ``(name, fn, inputs, tol)`` for every differentiable operation."""
    from . import core, nn, tensor as tc
    from .network import NetworkConfig, StageConfig, TwoBranchNet, fuse, init_fusion, residual_stage

    a, b = _t(rng, 2, 3, 4, name="a"), _t(rng, 2, 4, 5, name="b")
    yield "matmul", lambda: tc.matmul(a, b), [a, b], TOL

    x = _t(rng, 3, 5, scale=2.0, name="x")
    yield "softmax_lastdim", lambda: tc.softmax_lastdim(x), [x], TOL
    yield "log_softmax_lastdim", lambda: tc.log_softmax_lastdim(x), [x], TOL

    x = _t(rng, 2, 3, 4, name="x")
    yield "reshape_permute", lambda: tc.permute(tc.reshape(x, (4, 3, 2)), (2, 0, 1)), [x], TOL

    a, b = _t(rng, 2, 2, 3, 2, 2, name="a"), _t(rng, 2, 3, 3, 2, 2, name="b")
    yield "concat_channels", lambda: tc.concat_channels(a, b), [a, b], TOL
    c = _t(rng, 2, 2, 3, 2, 2, name="c")
    yield "add", lambda: tc.add(a, c), [a, c], TOL
    yield "mul", lambda: tc.mul(a, c), [a, c], TOL

    x = _t(rng, 4, 5, name="x")
    yield "relu", lambda: tc.relu(x), [x], TOL
    yield "dropout", lambda: tc.dropout(x, 0.6, True, np.random.default_rng(7)), [x], TOL
    y = _t(rng, 2, 3, 2, 3, 2, name="x")
    yield "mean_lastdims", lambda: tc.mean_lastdims(y, 3), [y], TOL

    x = _t(rng, 2, 4, 4, 5, 5, name="x")
    p = nn.Conv3dParams.init(4, 4, 3, rng, bias=True)
    yield "conv3d", lambda: nn.conv3d(x, p), [x, p.weight, p.bias], TOL
    pg = nn.Conv3dParams.init(4, 6, (3, 1, 1), rng, groups=2, bias=True)
    yield "conv3d_grouped", lambda: nn.conv3d(x, pg), [x, pg.weight, pg.bias], TOL
    ps = nn.Conv3dParams.init(4, 2, (1, 3, 3), rng, stride=(1, 2, 2))
    yield "conv3d_strided", lambda: nn.conv3d(x, ps), [x, ps.weight], TOL
    pr = nn.Conv3dParams.init(4, 4, (3, 1, 1), rng, groups=4, temporal_pad="replicate")
    yield "conv3d_replicate", lambda: nn.conv3d(x, pr), [x, pr.weight], TOL
    p1 = nn.Conv3dParams.init(4, 3, 1, rng, bias=True)
    yield "conv3d_pointwise", lambda: nn.conv3d(x, p1), [x, p1.weight, p1.bias], TOL

    x = _t(rng, 2, 3, 4, 2, 2, name="x")
    yield "temporal_maxpool2", lambda: nn.temporal_maxpool2(x), [x], TOL
    x2 = _t(rng, 2, 3, 2, 4, 4, name="x")
    yield "spatial_avgpool2", lambda: nn.spatial_avgpool2(x2), [x2], TOL
    yield "global_avgpool", lambda: nn.global_avgpool(x2), [x2], TOL

    x = _t(rng, 3, 4, 2, 3, 3, scale=2.0, name="x")
    bn = nn.BatchNormParams.init(4)
    bn.scale.data[:] = rng.uniform(0.5, 1.5, 4)
    bn.shift.data[:] = rng.standard_normal(4)
    yield "batchnorm3d_train", lambda: nn.batchnorm3d(x, bn, True), [x, bn.scale, bn.shift], TOL
    bne = nn.BatchNormParams.init(4)
    bne.running_mean[:] = rng.standard_normal(4)
    bne.running_var[:] = rng.uniform(0.5, 2.0, 4)
    yield "batchnorm3d_eval", lambda: nn.batchnorm3d(x, bne, False), [x, bne.scale, bne.shift], TOL

    logits = _t(rng, 5, 4, name="logits")
    labels = rng.integers(0, 4, 5)
    yield "cross_entropy", lambda: nn.cross_entropy(logits, labels), [logits], TOL
    feats = _t(rng, 3, 5, name="x")
    lin = nn.LinearParams.init(5, 4, rng)
    yield "linear", lambda: nn.linear(feats, lin), [feats, lin.weight, lin.bias], TOL

    x = _t(rng, 2, 4, 4, 2, 3, name="x")
    yield "gamma", lambda: core.gamma(x, 2), [x], TOL

    f = _t(rng, 2, 4, 4, 2, 2, scale=0.5, name="F")
    m = core.NutaModuleParams.init(4, 3, 2, rng, groups=2)
    m_params = [m.phi.weight, m.theta.weight, m.delta.weight, m.compress.weight]
    m_names = ["F", "phi", "theta", "delta", "compress"]
    yield ("projection_map", lambda: core.projection_map(f, m).values, [f, m.phi.weight, m.theta.weight],
           TOL, ["F", "phi", "theta"])
    yield "nuta_forward", lambda: core.nuta_forward(f, m)[0], [f] + m_params, TOL, m_names
    fr = _t(rng, 2, 4, 4, 2, 2, scale=0.5, name="F_res")

    def sync():
        return core.temporal_sync(fr, core.projection_map(f, m), m)

    yield ("temporal_sync", sync, [fr, f, m.zeta.weight, m.sync_compress.weight, m.theta.weight],
           TOL, ["F_res", "F", "zeta", "sync_compress", "theta"])

    prev = _t(rng, 2, 3, 2, 4, 4, scale=0.5, name="F_nuta_prev")
    res = _t(rng, 2, 4, 2, 2, 2, scale=0.5, name="F_res")
    for kind in ("concat", "sum", "nonlocal"):
        fp = init_fusion(kind, 3, 4, 2, rng)
        weights = [v.weight for v in fp.values()]  # built without norm: convs only
        yield (f"fuse_{kind}", lambda fp=fp, kind=kind: fuse(prev, res, kind, fp, heads=2),
               [prev, res] + weights, TOL, ["F_nuta_prev", "F_res"] + [f"{kind}.{k}" for k in fp])

    stage_cfg = StageConfig(blocks=1, channels=4, spatial_stride=2)
    sp = TwoBranchNet.init_stage(stage_cfg, 2, rng, "basic")
    xs = _t(rng, 2, 2, 2, 4, 4, name="x")
    stage_inputs = [xs] + [sp[0]["a"].weight, sp[0]["b"].weight, sp[0]["proj"].weight]
    yield ("residual_stage", lambda: residual_stage(xs, stage_cfg, sp, True), stage_inputs, TOL,
           ["x", "block0.a", "block0.b", "block0.proj"])

    cfg = NetworkConfig.micro()
    net = TwoBranchNet(cfg, np.random.default_rng(3))
    # zero-initialised keys and batch-norm scales would leave whole subgraphs
    # with vanishing gradients; move them off that start
    for t in net.params.tensors.values():
        if not np.any(t.data):
            t.data[...] = rng.standard_normal(t.shape) * 0.3
    clip = _t(rng, 2, 3, 4, 8, 8, name="clip")

    def run_net():
        return net.forward(clip, train_mode=True, rng=np.random.default_rng(11))

    named = list(net.params.tensors.items())
    yield ("network_micro", run_net, [clip] + [t for _, t in named], TOL_NETWORK,
           ["clip"] + [k for k, _ in named])


def run_suite(seed: int = 0, coords: int = 20, progress=None) -> list:
    rng = np.random.default_rng(seed)
    results = []
    for case in suite_cases(rng):
        name, fn, inputs, tol = case[:4]
        names = case[4] if len(case) > 4 else None
        res = run_check(name, fn, inputs, rng, tol=tol, coords=coords, names=names)
        if progress is not None:
            progress(res)
        results.append(res)
    return results
