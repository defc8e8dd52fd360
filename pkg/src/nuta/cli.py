"""Command-line entry point: ``nuta <subcommand> ...``.

Exit codes: 0 success, 1 validation or check failure, 2 usage error.
The default seed of every subcommand can be overridden with ``NUTA_SEED``.
Progress goes to stderr, results to stdout or files.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config_path


def _default_seed() -> int:
    raw = os.environ.get("NUTA_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(f"NUTA_SEED must be an integer, got {raw!r}")


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _resolve_config(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    return config_path(name)


def _load_net_config(name: str):
    from .network import NetworkConfig
    return NetworkConfig.from_file(_resolve_config(name))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    def show(r):
        print(f"{r.name:24s} worst rel err {r.worst:.3e}  tol {r.tol:.0e}  {'ok' if r.ok else 'FAIL'}"
              f"  ({r.seconds:.1f}s)", flush=True)

    results = run_suite(seed=args.seed, coords=args.coords, progress=show)
    bad = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(bad)}/{len(results)} ops passed")
    if bad:
        _err(f"gradient check failed for: {', '.join(bad)}")
        return 1
    return 0


_DATA_KEYS = ("train", "val", "classes", "frames", "size", "k_informative", "seed", "glyph_scale")
_DATA_DEFAULTS = {"train": 5000, "val": 1000, "classes": 8, "frames": 8, "size": 32, "k_informative": 2,
                  "glyph_scale": 2}


def cmd_gen_data(args) -> int:
    from .data import GlyphTask, generate_split

    settings = {k: getattr(args, k) for k in _DATA_KEYS}
    for k, v in _DATA_DEFAULTS.items():
        if settings[k] is None:
            settings[k] = v
    task = GlyphTask(settings["classes"], settings["frames"], settings["size"], settings["size"],
                     settings["k_informative"], settings["seed"], settings["glyph_scale"]).validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split in ("train", "val"):
        ds = generate_split(task, settings[split], split)
        ds.save(out / f"{split}.glyd")
        print(f"{split}: {len(ds)} clips -> {out / f'{split}.glyd'}", file=sys.stderr)
    return 0


def _load_split(data_dir, split):
    from .data import GlyphDataset
    return GlyphDataset.load(Path(data_dir) / f"{split}.glyd")


def _train_config(args):
    from .train import TrainConfig
    cfg = TrainConfig.from_text(Path(args.train_config).read_text(), args.train_config) if args.train_config \
        else TrainConfig(seed=_default_seed())
    over = {}
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("base_lr", "base_lr"), ("seed", "seed")):
        v = getattr(args, flag)
        if v is not None:
            over[key] = v
    if args.lr_drops is not None:
        over["lr_drop_epochs"] = tuple(int(v) for v in args.lr_drops.split(",") if v.strip())
    return replace(cfg, **over).validate()


def _write_summary(path: Path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "best_val_acc", "best_epoch", "final_val_acc", "final_attention_mass", "flag"])
        w.writerows(rows)


def cmd_train(args) -> int:
    from .train import print_progress, selectivity_flag, train

    net_cfg = _load_net_config(args.config)
    tcfg = _train_config(args)
    train_data, val_data = _load_split(args.data, "train"), _load_split(args.data, "val")
    dtype = np.float64 if args.dtype == "float64" else np.float32
    variants = [("main", net_cfg, Path(args.out))]
    if args.ablation:
        alt = "uniform" if net_cfg.head_features == "both" else "both"
        variants.append((f"head_{alt}", replace(net_cfg, head_features=alt), Path(args.out) / f"head_{alt}"))
    rows = []
    for label, cfg, out in variants:
        print(f"training {label} ({cfg.name}, head={cfg.head_features}) -> {out}", file=sys.stderr)
        out.mkdir(parents=True, exist_ok=True)
        (out / "network.cfg").write_text(cfg.to_text())
        res = train(cfg, tcfg, train_data, val_data, out_dir=out, dtype=dtype,
                    progress=None if args.quiet else print_progress)
        mass = res.final_eval.attention_mass
        flag = selectivity_flag(mass, val_data)
        if flag:
            print(f"WARNING {label}: {flag}", file=sys.stderr)
        rows.append([f"{label}:head={cfg.head_features}", repr(res.best_val_acc), res.best_epoch,
                     repr(res.final_eval.accuracy), "" if mass is None else repr(mass), flag or ""])
        print(f"{label}: best val acc {res.best_val_acc:.4f} (epoch {res.best_epoch}), "
              f"final {res.final_eval.accuracy:.4f}"
              + ("" if mass is None else f", attention mass {mass:.4f}"))
    _write_summary(Path(args.out) / "summary.csv", rows)
    return 0


def _load_net(cfg, checkpoint, dtype="float32"):
    from .network import TwoBranchNet
    net = TwoBranchNet(cfg, np.random.default_rng(0), dtype=np.dtype(dtype).type)
    if checkpoint:
        net.load(checkpoint)
    return net


def _config_for_checkpoint(args):
    if args.config:
        return _load_net_config(args.config)
    if args.checkpoint:
        candidate = Path(args.checkpoint).parent / "network.cfg"
        if candidate.exists():
            from .network import NetworkConfig
            return NetworkConfig.from_file(candidate)
    return _load_net_config("toy")


def cmd_eval(args) -> int:
    from .train import evaluate

    cfg = _config_for_checkpoint(args)
    net = _load_net(cfg, args.checkpoint, args.dtype)
    data = _load_split(args.data, args.split)
    res = evaluate(net, data)
    print(f"accuracy {res.accuracy!r}")
    print("per-class " + " ".join(f"{c}:{a:.4f}" for c, a in enumerate(res.per_class)))
    if res.attention_mass is not None:
        k_over_t = float(data.informative.sum(1).mean()) / data.frames
        print(f"attention mass {res.attention_mass!r} (stage {res.attention_stage}; uniform baseline {k_over_t!r})")
    if args.predictions:
        with open(args.predictions, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "label", "prediction"])
            w.writerows(zip(range(len(data)), data.labels.tolist(), res.predictions.tolist()))
    return 0


def cmd_flops(args) -> int:
    from .flops import compare_published, count_flops, ratio

    def report(name):
        cfg = _load_net_config(name)
        frames = args.frames or cfg.frames
        size = args.size or cfg.size
        cfg.check_input(frames, size, size)
        return count_flops(cfg, (args.batch, cfg.in_channels, frames, size, size))

    reports = [report(args.config)] + ([report(args.compare)] if args.compare else [])
    for rep in reports:
        if args.format in ("table", "both"):
            print(rep.table())
        if args.format in ("csv", "both"):
            print(rep.to_csv(), end="")
        cmp = compare_published(rep)
        if cmp:
            dev = cmp["deviation"]
            print(f"published {cmp['published']} GFLOPs: deviation {dev['mac']:+.1%} (1 FLOP/MAC), "
                  f"{dev['2mac']:+.1%} (2 FLOPs/MAC); closer convention: {cmp['best']}")
    if args.csv:
        Path(args.csv).write_text(reports[0].to_csv())
    if args.compare:
        r = ratio(reports[1], reports[0])
        print(f"ratio {reports[1].config}/{reports[0].config} = {r:.4f} (same under either convention)")
    return 0


def cmd_viz(args) -> int:
    from .network import ForwardInfo
    from .tensor import Tensor
    from .train import attention_mass
    from .viz import export_heatmap

    cfg = _config_for_checkpoint(args)
    net = _load_net(cfg, args.checkpoint, args.dtype)
    informative = None
    if args.constant is not None:
        clip = np.full((1, cfg.in_channels, cfg.frames, cfg.size, cfg.size), args.constant)
        clip_id = f"constant{args.constant:g}"
    else:
        if not args.data:
            _err("viz needs --data or --constant")
            return 2
        data = _load_split(args.data, args.split)
        if not 0 <= args.index < len(data):
            _err(f"--index {args.index} outside [0, {len(data)})")
            return 1
        clip = data.clips([args.index])
        informative = data.informative[[args.index]]
        clip_id = f"{args.split}{args.index}"
    info = ForwardInfo()
    net.forward(Tensor(clip.astype(net.dtype)), info=info)
    if not info.maps:
        _err(f"config {cfg.name} has no NUTA stages")
        return 1
    for stage, m in sorted(info.maps.items()):
        for e in export_heatmap(m, f"{clip_id}_stage{stage}", args.out, scale=args.scale):
            print(f"stage {stage} head {e.head}: {e.text_path} {e.image_path} (min {e.vmin:.4g}, max {e.vmax:.4g})")
        if informative is not None and m.source_steps == informative.shape[1]:
            frames = np.flatnonzero(informative[0]).tolist()
            print(f"stage {stage} attention mass on informative frames {frames}: "
                  f"{attention_mass(m, informative)!r}")
    return 0


def cmd_invariants(args) -> int:
    from .invariants import run_all

    def show(r):
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail}", flush=True)

    results = run_all(trials=args.trials, progress=show)
    bad = [r for r in results if not r.ok]
    print(f"{len(results) - len(bad)}/{len(results)} invariants hold")
    return 1 if bad else 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nuta", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="subcommand")
    seed = _default_seed()

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    g.add_argument("--seed", type=int, default=seed)
    g.add_argument("--coords", type=int, default=20, help="sampled coordinates per tensor")
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("gen-data", help="generate the synthetic glyph dataset")
    d.add_argument("--out", required=True)
    for key in _DATA_KEYS:
        d.add_argument(f"--{key.replace('_', '-')}", dest=key, type=int,
                       default=seed if key == "seed" else None)
    d.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a network on a generated dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", default="toy", help="shipped config name or path")
    t.add_argument("--train-config", help="key = value file over the training fields")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--base-lr", type=float)
    t.add_argument("--lr-drops", help="comma-separated epochs")
    t.add_argument("--seed", type=int)
    t.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    t.add_argument("--ablation", action="store_true", help="also train the other head variant")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config")
    e.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    e.add_argument("--split", choices=("train", "val"), default="val")
    e.add_argument("--predictions", help="write per-sample predictions here")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("flops", help="analytic cost report")
    f.add_argument("--config", required=True)
    f.add_argument("--compare")
    f.add_argument("--batch", type=int, default=1)
    f.add_argument("--frames", type=int)
    f.add_argument("--size", type=int)
    f.add_argument("--format", choices=("table", "csv", "both"), default="both")
    f.add_argument("--csv", help="also write the per-layer records of --config here")
    f.set_defaults(func=cmd_flops)

    v = sub.add_parser("viz", help="export projection-map heatmaps for one clip")
    v.add_argument("--out", required=True)
    v.add_argument("--checkpoint")
    v.add_argument("--config")
    v.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    v.add_argument("--data")
    v.add_argument("--split", choices=("train", "val"), default="val")
    v.add_argument("--index", type=int, default=0)
    v.add_argument("--constant", type=float, help="use a constant clip instead of data")
    v.add_argument("--scale", type=int, default=16, help="image pixels per map cell")
    v.set_defaults(func=cmd_viz)

    i = sub.add_parser("invariants", help="run the property suite")
    i.add_argument("--trials", type=int, default=1000)
    i.set_defaults(func=cmd_invariants)

    p.subcommands = sub.choices
    for sp in sub.choices.values():
        sp.add_argument("--options", metavar="FILE",
                        help="key = value file giving defaults for any flag of this subcommand")
    return p


def _bool(raw: str) -> bool:
    if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
        raise ValueError(f"expected a boolean, got {raw!r}")
    return raw.lower() in ("true", "1", "yes")


def _options_file(argv):
    for i, tok in enumerate(argv):
        if tok == "--options" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--options="):
            return tok.split("=", 1)[1]
    return None


def _apply_options(parser, argv, path):
    """Set subcommand defaults from ``--options FILE``; flags still win.

    Keys are flag names without the leading dashes (``-`` and ``_`` are
    interchangeable).  Required flags may be supplied from the file.
    """
    from .network import ConfigError, parse_kv

    command = next((tok for tok in argv if not tok.startswith("-")), None)
    sub = parser.subcommands.get(command)
    if sub is None:
        return
    try:
        values = parse_kv(Path(path).read_text(), path)
    except (OSError, ConfigError) as exc:
        sub.error(f"cannot use options file: {exc}")
    actions = {a.dest: a for a in sub._actions if a.option_strings}
    defaults = {}
    for key, raw in values.items():
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("help", "options"):
            sub.error(f"{path}: unknown option {key!r}")
        action = actions[dest]
        try:
            if isinstance(action, argparse._StoreTrueAction):
                defaults[dest] = _bool(raw)
            else:
                defaults[dest] = action.type(raw) if action.type else raw
        except ValueError as exc:
            sub.error(f"{path}: bad value for {key!r}: {exc}")
        if action.choices is not None and defaults[dest] not in action.choices:
            sub.error(f"{path}: {key} must be one of {sorted(action.choices)}")
        action.required = False
    sub.set_defaults(**defaults)


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    path = _options_file(argv)
    if path is not None:
        _apply_options(parser, argv, path)
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        _err(str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
