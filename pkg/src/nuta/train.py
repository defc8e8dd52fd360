"""SGD training, evaluation and attention diagnostics for the glyph task."""

from __future__ import annotations

import csv
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import ProjectionMap
from .data import GlyphDataset
from .network import ConfigError, ForwardInfo, NetworkConfig, TwoBranchNet, parse_kv
from .nn import cross_entropy
from .tensor import NonFiniteError, Tape, Tensor, backward

# wall time is kept out of the file so logs are reproducible
METRIC_FIELDS = ("epoch", "lr", "train_loss", "train_acc", "val_acc", "val_attention_mass")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_drop_epochs: tuple = (20, 25)
    lr_drop_factor: float = 10.0
    batch_size: int = 32
    seed: int = 0
    flip: bool = True
    temporal_offset: bool = True
    eval_batch_size: int = 100

    def validate(self) -> "TrainConfig":
        drops = tuple(self.lr_drop_epochs)
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ValueError(f"lr_drop_epochs must be strictly increasing, got {drops}")
        if drops and drops[-1] >= self.epochs:
            raise ValueError(f"lr drop at epoch {drops[-1]} is not before the last epoch ({self.epochs})")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr_drop_factor <= 0:
            raise ValueError("lr_drop_factor must be positive")
        return self

    @classmethod
    def from_text(cls, text: str, source: str = "<train config>") -> "TrainConfig":
        """Flat ``key = value`` file over the dataclass fields."""
        values = parse_kv(text, source)
        kw = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            raw = values.pop(f.name)
            try:
                if f.name == "lr_drop_epochs":
                    kw[f.name] = tuple(int(v) for v in raw.split(",") if v.strip())
                elif f.type in ("bool", bool):
                    if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError("expected a boolean")
                    kw[f.name] = raw.lower() in ("true", "1", "yes")
                elif f.type in ("int", int):
                    kw[f.name] = int(raw)
                else:
                    kw[f.name] = float(raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {f.name!r}: {raw!r} ({exc})") from None
        if values:
            raise ConfigError(f"{source}: unknown keys {sorted(values)}")
        return cls(**kw).validate()


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    drops = sum(1 for e in cfg.lr_drop_epochs if e <= epoch)
    return cfg.base_lr / cfg.lr_drop_factor ** drops  # divide: 0.05 / 10 is exactly 0.005


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient:
    ``v = mu * v + g + wd * p``; ``p -= lr * v``."""

    def __init__(self, params: dict, momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self, lr: float) -> None:
        for k, t in self.params.items():
            g = t.grad if t.grad is not None else 0.0
            v = self.velocity[k]
            v *= self.momentum
            v += g
            if self.weight_decay:
                v += self.weight_decay * t.data
            t.data -= (lr * v).astype(t.data.dtype, copy=False)


def first_nonfinite(params: dict, loss: Tensor | None = None) -> str:
    """Name of the earliest non-finite tensor: a parameter, a gradient, or a
    recorded op output in execution order."""
    for k, t in params.items():
        if not np.all(np.isfinite(t.data)):
            return f"parameter {k}"
    if loss is not None:
        for i, t in enumerate(Tape.of(loss).nodes):
            if not np.all(np.isfinite(t.data)):
                return f"op #{i} ({t._node.name}, shape {t.shape})"
    for k, t in params.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            return f"gradient of {k}"
    return "none found"


def augment(clips: np.ndarray, informative: np.ndarray, rng: np.random.Generator, flip: bool, offset: bool):
    clips = clips.copy()
    informative = informative.copy()
    for i in range(len(clips)):
        if flip and rng.random() < 0.5:
            clips[i] = clips[i, :, :, :, ::-1]
        if offset:
            s = int(rng.integers(0, clips.shape[2]))
            clips[i] = np.roll(clips[i], s, axis=1)
            informative[i] = np.roll(informative[i], s)
    return clips, informative


def attention_mass(m, informative) -> float:
    """Mean (over batch, heads and output steps) of the map weight that lands on
    informative source frames.

    ``informative`` is a boolean mask ``[N, T]`` or a list of index collections.
    """
    values = m.numpy() if isinstance(m, ProjectionMap) else np.asarray(m)
    n, _, _, t = values.shape
    if isinstance(informative, np.ndarray) and informative.dtype == bool:
        mask = informative
        if mask.shape != (n, t):
            raise ValueError(f"informative mask shape {mask.shape} != {(n, t)}")
    else:
        if len(informative) != n:
            raise ValueError(f"{len(informative)} index sets for a batch of {n}")
        mask = np.zeros((n, t), dtype=bool)
        for i, idx in enumerate(informative):
            idx = np.asarray(list(idx), dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= t):
                raise IndexError(f"informative frame index out of range [0, {t}) in sample {i}: {idx.tolist()}")
            mask[i, idx] = True
    picked = (values * mask[:, None, None, :]).sum(axis=-1)
    return float(picked.mean())


SELECTIVITY_FACTOR = 1.5


def selectivity_flag(mass: float | None, data: GlyphDataset, factor: float = SELECTIVITY_FACTOR) -> str | None:
    """Warning text when attention mass does not beat the uniform baseline
    k/T by ``factor``; ``None`` when it does."""
    if mass is None:
        return "no NUTA stage sees input frames; attention mass not measured"
    baseline = float(data.informative.sum(1).mean()) / data.frames
    if mass >= factor * baseline:
        return None
    return (f"attention selectivity below target: mass {mass:.4f} < {factor} x uniform baseline "
            f"{baseline:.4f} = {factor * baseline:.4f}")


@dataclass
class EvalResult:
    accuracy: float
    per_class: np.ndarray
    predictions: np.ndarray
    attention_mass: float | None = None
    attention_stage: int | None = None


def _predict_net(net: TwoBranchNet, clips: np.ndarray, info: ForwardInfo):
    return net.forward(Tensor(clips.astype(net.dtype, copy=False)), train_mode=False, info=info).data


def evaluate(model, data: GlyphDataset, batch_size: int = 100) -> EvalResult:
    """Top-1 accuracy in eval mode.

    ``model`` is a :class:`TwoBranchNet` or any callable mapping a float clip
    batch ``[B, 3, T, H, W]`` to logits.  For a network, attention mass on the
    informative frames is measured with the first NUTA stage's map (the only
    one whose source steps are input frames).
    """
    preds = np.empty(len(data), dtype=np.int64)
    mass_sum, mass_n, stage = 0.0, 0, None
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        clips = data.clips(idx)
        if isinstance(model, TwoBranchNet):
            info = ForwardInfo()
            logits = _predict_net(model, clips, info)
            if info.maps:
                stage = min(info.maps)
                m = info.maps[stage]
                if m.source_steps == data.frames:
                    mass_sum += attention_mass(m, data.informative[idx]) * len(idx)
                    mass_n += len(idx)
        else:
            logits = model(clips)
            logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
        preds[idx] = np.argmax(logits, axis=1)
    correct = preds == data.labels
    per_class = np.array([correct[data.labels == c].mean() if np.any(data.labels == c) else np.nan
                          for c in range(data.classes)])
    mass = mass_sum / mass_n if mass_n else None
    return EvalResult(float(correct.mean()), per_class, preds, mass, stage if mass_n else None)


@dataclass
class TrainResult:
    records: list = field(default_factory=list)
    best_val_acc: float = 0.0
    best_epoch: int = -1
    checkpoint: Path | None = None
    final_eval: EvalResult | None = None
    net: TwoBranchNet | None = None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def train(net_cfg: NetworkConfig, train_cfg: TrainConfig, train_data: GlyphDataset, val_data: GlyphDataset,
          out_dir=None, dtype=np.float32, progress=None, net: TwoBranchNet | None = None) -> TrainResult:
    """Train a fresh network (or ``net``) and return the log.

    With ``out_dir`` the per-epoch records go to ``metrics.csv`` and the
    best-validation parameters to ``best.npz``.  ``progress`` receives each
    record as it is produced.
    """
    train_cfg.validate()
    net_cfg.validate()
    if net is None:
        net = TwoBranchNet(net_cfg, np.random.default_rng([train_cfg.seed, 0]), dtype=dtype)
    params = net.params.tensors
    opt = SGD(params, train_cfg.momentum, train_cfg.weight_decay)
    result = TrainResult()
    metrics_path = ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path, ckpt_path = out_dir / "metrics.csv", out_dir / "best.npz"
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRIC_FIELDS)

    n = len(train_data)
    for epoch in range(train_cfg.epochs):
        start = time.perf_counter()
        lr = lr_at(train_cfg, epoch)
        rng = np.random.default_rng([train_cfg.seed, 1, epoch])
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for b in range(0, n, train_cfg.batch_size):
            idx = np.sort(order[b:b + train_cfg.batch_size])
            clips, _ = augment(train_data.clips(idx), train_data.informative[idx], rng,
                               train_cfg.flip, train_cfg.temporal_offset)
            labels = train_data.labels[idx]
            net.zero_grad()
            try:
                logits = net.forward(Tensor(clips.astype(net.dtype, copy=False)), train_mode=True, rng=rng)
                loss = cross_entropy(logits, labels)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch {b // train_cfg.batch_size}: {exc}; "
                                       f"first non-finite tensor: {first_nonfinite(params, exc.tensor)}") from exc
            if not np.isfinite(loss.data).all():
                raise TrainingDiverged(f"epoch {epoch}, batch {b // train_cfg.batch_size}: loss is "
                                       f"{float(loss.data)}; first non-finite tensor: "
                                       f"{first_nonfinite(params, loss)}")
            backward(loss)
            opt.step(lr)
            loss_sum += float(loss.data) * len(idx)
            correct += int((np.argmax(logits.data, axis=1) == labels).sum())
        ev = evaluate(net, val_data, train_cfg.eval_batch_size)
        record = {"epoch": epoch, "lr": lr, "train_loss": loss_sum / n, "train_acc": correct / n,
                  "val_acc": ev.accuracy, "val_attention_mass": ev.attention_mass,
                  "seconds": time.perf_counter() - start}
        result.records.append(record)
        if ev.accuracy > result.best_val_acc or result.best_epoch < 0:
            result.best_val_acc, result.best_epoch = ev.accuracy, epoch
            if ckpt_path is not None:
                net.save(ckpt_path)
                result.checkpoint = ckpt_path
        if metrics_path is not None:
            with open(metrics_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow([_fmt(record[k]) for k in METRIC_FIELDS])
        if progress is not None:
            progress(record)
    result.final_eval = ev
    result.net = net
    return result


def print_progress(record: dict, stream=sys.stderr) -> None:
    mass = record["val_attention_mass"]
    print(f"epoch {record['epoch']:3d}  lr {record['lr']:.5f}  loss {record['train_loss']:.4f}  "
          f"train {record['train_acc']:.3f}  val {record['val_acc']:.3f}  "
          f"mass {'-' if mass is None else f'{mass:.3f}'}  {record['seconds']:.1f}s", file=stream, flush=True)
