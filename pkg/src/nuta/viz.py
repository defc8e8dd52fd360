"""Projection-map export: a full-precision text grid and an 8-bit binary
graymap (P5, maxval 255) per head.

The text grid is the source of truth; every value is written with ``repr``
so it parses back to the identical float.  Images are min-max normalised per
head; a constant head becomes flat mid-gray (128).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ProjectionMap


@dataclass
class HeatmapExport:
    head: int
    text_path: Path
    image_path: Path
    vmin: float
    vmax: float


def to_gray(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.full(values.shape, 128, dtype=np.uint8)
    return np.rint((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts, pos = [], 0
    while len(parts) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        parts.append(raw[pos:end])
        pos = end
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary graymap")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: maxval {maxval} unsupported")
    pos += 1  # single whitespace after maxval
    return np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8).reshape(h, w)


def write_text_grid(path, values: np.ndarray, header: str = "") -> None:
    lines = [f"# {line}" for line in header.splitlines()]
    lines += [" ".join(repr(float(v)) for v in row) for row in values]
    Path(path).write_text("\n".join(lines) + "\n")


def read_text_grid(path) -> np.ndarray:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            rows.append([float(v) for v in line.split()])
    return np.array(rows)


def export_heatmap(m, clip_id: str, out_dir, sample: int = 0, scale: int = 1) -> list:
    """Write ``{clip_id}_head{h}.txt`` and ``.pgm`` for every head of one clip.

    Rows are output steps, columns are source frames.  ``scale`` enlarges the
    image by pixel replication (the text grid is never scaled).
    """
    values = m.numpy() if isinstance(m, ProjectionMap) else np.asarray(m)
    if values.ndim != 4:
        raise ValueError(f"expected a map [N, heads, T/2, T], got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("projection map has non-finite entries")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    exports = []
    for h in range(values.shape[1]):
        grid = values[sample, h]
        lo, hi = float(grid.min()), float(grid.max())
        txt = out_dir / f"{clip_id}_head{h}.txt"
        img = out_dir / f"{clip_id}_head{h}.pgm"
        header = (f"clip {clip_id} head {h}: rows = output steps, columns = source frames\n"
                  f"min {lo!r} max {hi!r}")
        try:
            write_text_grid(txt, grid, header)
            gray = to_gray(grid)
            if scale > 1:
                gray = np.kron(gray, np.ones((scale, scale), dtype=np.uint8))
            write_pgm(img, gray)
        except OSError as exc:
            raise OSError(f"failed writing heatmap to {out_dir}: {exc}") from exc
        exports.append(HeatmapExport(h, txt, img, lo, hi))
    return exports
