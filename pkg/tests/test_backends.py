import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nuta import _accel

pytestmark = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not importable")


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.sampled_from([(1, 1, 1), (3, 1, 1), (1, 3, 3), (3, 3, 3)]),
       s=st.sampled_from([(1, 1, 1), (2, 2, 2), (1, 2, 2)]), t=st.integers(3, 6), hw=st.integers(3, 7))
def test_col2vol_backends_bit_identical(seed, k, s, t, hw):
    rng = np.random.default_rng(seed)
    shape = (2, 3, t, hw, hw)
    out = tuple((n - kk) // ss + 1 for n, kk, ss in zip(shape[2:], k, s))
    cols = rng.standard_normal((2, 3, *k, *out))
    a = _accel.col2vol_numpy(cols, shape, s)
    b = _accel.col2vol_numba(cols, shape, s)
    assert a.tobytes() == b.tobytes()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), t=st.sampled_from([2, 4, 6]), ties=st.booleans())
def test_tmax2_backends_bit_identical(seed, t, ties):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, t, 2, 3)).astype(np.float32)
    if ties:
        x = np.round(x)
    ya, pa = _accel.tmax2_forward_numpy(x)
    yb, pb = _accel.tmax2_forward_numba(x)
    assert ya.tobytes() == yb.tobytes() and np.array_equal(pa, pb)
    g = rng.standard_normal(ya.shape).astype(np.float32)
    assert _accel.tmax2_backward_numpy(g, pa).tobytes() == _accel.tmax2_backward_numba(g, pb).tobytes()


STEP = """
import hashlib, numpy as np
from nuta import _accel
from nuta.network import NetworkConfig, TwoBranchNet
from nuta.nn import cross_entropy
from nuta.tensor import Tensor, backward
net = TwoBranchNet(NetworkConfig.toy(), np.random.default_rng(0), dtype=np.float32)
x = Tensor(np.random.default_rng(1).random((4, 3, 8, 32, 32)).astype(np.float32))
loss = cross_entropy(net.forward(x, train_mode=True, rng=np.random.default_rng(2)), np.arange(4))
backward(loss)
h = hashlib.sha256(loss.data.tobytes())
for k in sorted(net.params.tensors):
    h.update(net.params.tensors[k].grad.tobytes())
print(_accel.backend(), h.hexdigest())
"""


def test_training_step_identical_across_backends():
    out = {}
    for flag in ("0", "1"):
        res = subprocess.run([sys.executable, "-c", STEP], env=dict(os.environ, NUTA_DISABLE_NUMBA=flag),
                             capture_output=True, text=True, check=True)
        backend, digest = res.stdout.split()
        out[backend] = digest
    assert set(out) == {"numba", "numpy"}
    assert out["numba"] == out["numpy"]
