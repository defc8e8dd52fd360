import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nuta.core import ProjectionMap
from nuta.tensor import Tensor
from nuta.viz import export_heatmap, read_pgm, read_text_grid, to_gray, write_pgm


def test_uniform_map_is_flat_gray(tmp_path):
    m = np.full((1, 2, 4, 8), 1 / 8)
    exports = export_heatmap(m, "u", tmp_path)
    assert [e.head for e in exports] == [0, 1]
    for e in exports:
        assert np.all(read_pgm(e.image_path) == 128)
        assert np.all(read_text_grid(e.text_path) == 1 / 8)
        assert e.vmin == e.vmax == 1 / 8


def test_one_hot_map_has_one_white_cell_per_row(tmp_path):
    m = np.zeros((1, 1, 4, 8))
    cols = [2, 0, 7, 5]
    m[0, 0, range(4), cols] = 1.0
    (e,) = export_heatmap(m, "h", tmp_path)
    img = read_pgm(e.image_path)
    assert img.shape == (4, 8)
    assert (img == 255).sum(axis=1).tolist() == [1, 1, 1, 1]
    assert np.argmax(img, axis=1).tolist() == cols
    assert set(np.unique(img)) == {0, 255}


def test_scale_replicates_pixels(tmp_path):
    m = np.zeros((1, 1, 2, 4))
    m[0, 0, 0, 1] = m[0, 0, 1, 3] = 1.0
    (e,) = export_heatmap(m, "s", tmp_path, scale=3)
    img = read_pgm(e.image_path)
    assert img.shape == (6, 12)
    assert np.array_equal(img[::3, ::3], to_gray(m[0, 0]))
    assert read_text_grid(e.text_path).shape == (2, 4)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), t=st.sampled_from([2, 4, 6, 8]), heads=st.integers(1, 3))
def test_text_grid_round_trip_is_bit_exact(tmp_path_factory, seed, t, heads):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((2, heads, t // 2, t)) * 4
    m = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    out = tmp_path_factory.mktemp("rt")
    for e in export_heatmap(ProjectionMap(Tensor(m)), "r", out, sample=1):
        assert read_text_grid(e.text_path).tobytes() == m[1, e.head].tobytes()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=40))
def test_gray_is_monotone_in_value(values):
    v = np.array(values)
    g = to_gray(v)
    order = np.argsort(v, kind="stable")
    assert np.all(np.diff(g[order].astype(int)) >= 0)
    if v.max() > v.min():
        assert g[np.argmin(v)] == 0 and g[np.argmax(v)] == 255


def test_float32_map_round_trips(tmp_path):
    m = (np.random.default_rng(0).random((1, 1, 2, 4)).astype(np.float32))
    (e,) = export_heatmap(m, "f", tmp_path)
    np.testing.assert_array_equal(read_text_grid(e.text_path).astype(np.float32), m[0, 0])


def test_pgm_header_and_layout(tmp_path):
    img = np.arange(12, dtype=np.uint8).reshape(3, 4)
    write_pgm(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n4 3\n255\n")
    assert raw[len(b"P5\n4 3\n255\n"):] == img.tobytes()
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), img)


def test_pgm_reader_skips_comments(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made elsewhere\n2 1\n255\n\x01\x02")
    assert read_pgm(tmp_path / "c.pgm").tolist() == [[1, 2]]


def test_non_finite_map_rejected(tmp_path):
    m = np.full((1, 1, 2, 4), 0.25)
    m[0, 0, 1, 2] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        export_heatmap(m, "bad", tmp_path)


def test_wrong_rank_rejected(tmp_path):
    with pytest.raises(ValueError, match="expected a map"):
        export_heatmap(np.ones((2, 4)), "bad", tmp_path)


def test_write_failure_names_the_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("not a directory")
    with pytest.raises(OSError, match=str(blocker)):
        export_heatmap(np.full((1, 1, 2, 4), 0.25), "x", blocker / "sub")
