"""Synthetic moving-glyph clips with sparse informative frames.

Every clip shows one glyph moving across a textured background.  On
``k_informative`` frames the glyph is the label class, drawn in a reddish
colour; on every other frame it is a distractor glyph of a different class,
drawn in a greenish colour.  A single frame therefore says nothing reliable
about the label unless it is one of the informative ones.

Each sample is rendered from its own generator seeded with
``(seed, split, index)``, so any sample can be regenerated in isolation and
train/val never share a random stream.

File layout (little-endian), one file per split::

    magic    4 bytes   b"GLYD"
    version  uint16    1
    count, classes, channels, frames, height, width   6 x uint32
    count records of:
        pixels   uint8[channels * frames * height * width]  (row-major C, T, H, W)
        label    uint8
        bitmap   uint8[ceil(frames / 8)]   bit t (LSB first) set = frame t informative

Pixel value v stands for intensity v / 255.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"GLYD"
VERSION = 1
GLYPH = 7
SPLITS = {"train": 0, "val": 1}
_HEADER = struct.Struct("<4sH6I")

LABEL_RGB = np.array([0.85, 0.18, 0.15])
DISTRACTOR_RGB = np.array([0.15, 0.75, 0.22])


@dataclass(frozen=True)
class GlyphTask:
    classes: int = 8
    frames: int = 8
    height: int = 32
    width: int = 32
    k_informative: int = 2
    seed: int = 0
    glyph_scale: int = 2

    def validate(self) -> "GlyphTask":
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        if not 1 <= self.k_informative < self.frames:
            raise ValueError(f"k_informative must satisfy 1 <= k < T={self.frames}, got {self.k_informative}")
        if self.classes > 255:
            raise ValueError("labels are stored as uint8; at most 255 classes")
        side = GLYPH * self.glyph_scale
        if side > self.height or side > self.width:
            raise ValueError(f"infeasible geometry: {side}px glyph does not fit a {self.height}x{self.width} frame")
        return self


def glyph_bank(classes: int, seed: int, min_distance: int = 10) -> np.ndarray:
    """``classes`` binary 7x7 patterns, pairwise at least ``min_distance`` cells
    apart even after mirroring either one, so a flipped clip still names one class."""
    rng = np.random.default_rng([seed, 7919])
    bank: list = []
    tries = 0
    while len(bank) < classes:
        tries += 1
        if tries > 100000:
            raise RuntimeError(f"could not find {classes} separable glyphs")
        g = rng.random((GLYPH, GLYPH)) < 0.5
        if not 18 <= g.sum() <= 31:
            continue
        ok = True
        for other in bank:
            for cand in (g, g[:, ::-1]):
                if (cand != other).sum() < min_distance:
                    ok = False
        if ok:
            bank.append(g)
    return np.stack(bank).astype(np.float64)


def _bounce(start: int, step: int, t: int, span: int) -> int:
    if span == 0:
        return 0
    period = 2 * span
    p = (start + step * t) % period
    return p if p <= span else period - p


def render_clip(task: GlyphTask, bank: np.ndarray, split: int, index: int,
                draw_label: bool = True, draw_distractors: bool = True):
    """Render one sample as float values in [0, 1], shape ``[3, T, H, W]``.

    Returns ``(frames, label, informative_mask)``.  All random draws happen
    before any drawing, so switching layers off leaves the rest untouched.
    """
    rng = np.random.default_rng([task.seed, split, index])
    k, t_len, h, w = task.classes, task.frames, task.height, task.width
    label = index % k
    informative = np.zeros(t_len, dtype=bool)
    informative[rng.choice(t_len, size=task.k_informative, replace=False)] = True
    others = np.array([c for c in range(k) if c != label])
    distractors = others[rng.integers(0, len(others), size=t_len)]
    base = rng.uniform(0.3, 0.55, size=3)
    texture = rng.normal(0.0, 0.04, size=(3, h, w))
    noise = rng.normal(0.0, 0.015, size=(3, t_len, h, w))
    side = GLYPH * task.glyph_scale
    y0, x0 = rng.integers(0, h - side + 1), rng.integers(0, w - side + 1)
    vy, vx = rng.integers(-2, 3, size=2)
    jitter = rng.uniform(-0.05, 0.05, size=(t_len, 3))

    frames = base[:, None, None, None] + texture[:, None] + noise
    for t in range(t_len):
        if informative[t]:
            if not draw_label:
                continue
            glyph, colour = bank[label], LABEL_RGB
        else:
            if not draw_distractors:
                continue
            glyph, colour = bank[distractors[t]], DISTRACTOR_RGB
        mask = np.kron(glyph, np.ones((task.glyph_scale, task.glyph_scale))).astype(bool)
        y = _bounce(int(y0), int(vy), t, h - side)
        x = _bounce(int(x0), int(vx), t, w - side)
        for c in range(3):
            patch = frames[c, t, y:y + side, x:x + side]
            patch[mask] = colour[c] + jitter[t, c]
    return np.clip(frames, 0.0, 1.0), label, informative


def quantize(frames: np.ndarray) -> np.ndarray:
    return np.rint(frames * 255.0).astype(np.uint8)


@dataclass(eq=False)
class GlyphDataset:
    pixels: np.ndarray  # uint8 [N, 3, T, H, W]
    labels: np.ndarray  # int64 [N]
    informative: np.ndarray  # bool [N, T]
    classes: int

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def frames(self) -> int:
        return self.pixels.shape[2]

    def clips(self, idx=None, dtype=np.float32) -> np.ndarray:
        px = self.pixels if idx is None else self.pixels[idx]
        return px.astype(dtype) / dtype(255.0)

    def subset(self, idx) -> "GlyphDataset":
        idx = np.asarray(idx)
        return GlyphDataset(self.pixels[idx], self.labels[idx], self.informative[idx], self.classes)

    # -- serialization ---------------------------------------------------------
    def _record_dtype(self):
        _, c, t, h, w = self.pixels.shape
        return np.dtype([("pixels", np.uint8, (c, t, h, w)), ("label", np.uint8),
                         ("bitmap", np.uint8, ((t + 7) // 8,))])

    def save(self, path) -> None:
        path = Path(path)
        n, c, t, h, w = self.pixels.shape
        rec = np.zeros(n, dtype=self._record_dtype())
        rec["pixels"] = self.pixels
        rec["label"] = self.labels
        rec["bitmap"] = np.packbits(self.informative, axis=1, bitorder="little")
        try:
            with open(path, "wb") as fh:
                fh.write(_HEADER.pack(MAGIC, VERSION, n, self.classes, c, t, h, w))
                fh.write(rec.tobytes())
        except OSError as exc:
            raise OSError(f"cannot write dataset to {path}: {exc}") from exc

    @classmethod
    def load(cls, path) -> "GlyphDataset":
        path = Path(path)
        raw = path.read_bytes()
        if len(raw) < _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, n, k, c, t, h, w = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        proto = cls(np.zeros((0, c, t, h, w), np.uint8), np.zeros(0, np.int64), np.zeros((0, t), bool), k)
        dt = proto._record_dtype()
        body = raw[_HEADER.size:]
        if len(body) != n * dt.itemsize:
            raise ValueError(f"{path}: expected {n} records of {dt.itemsize} bytes, found {len(body)} bytes")
        rec = np.frombuffer(body, dtype=dt)
        informative = np.unpackbits(rec["bitmap"], axis=1, bitorder="little")[:, :t].astype(bool)
        return cls(rec["pixels"].copy(), rec["label"].astype(np.int64), informative, k)


def generate_split(task: GlyphTask, count: int, split: str) -> GlyphDataset:
    task.validate()
    code = SPLITS[split]
    bank = glyph_bank(task.classes, task.seed)
    pixels = np.empty((count, 3, task.frames, task.height, task.width), dtype=np.uint8)
    labels = np.empty(count, dtype=np.int64)
    informative = np.empty((count, task.frames), dtype=bool)
    for i in range(count):
        clip, labels[i], informative[i] = render_clip(task, bank, code, i)
        pixels[i] = quantize(clip)
    return GlyphDataset(pixels, labels, informative, task.classes)


def generate_dataset(num_train: int, num_val: int, classes: int = 8, frames: int = 8, height: int = 32,
                     width: int = 32, k_informative: int = 2, seed: int = 0, glyph_scale: int = 2):
    """Returns ``(train, val)``."""
    task = GlyphTask(classes, frames, height, width, k_informative, seed, glyph_scale).validate()
    return generate_split(task, num_train, "train"), generate_split(task, num_val, "val")
