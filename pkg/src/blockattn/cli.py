"""Command line entry point: ``blockattn {verify,counts,bench,train,ablate,attnmap}``.

Exit codes: 0 success, 1 failure (failed check, unreadable input), 2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import os
import sys

import numpy as np

from . import attention as att
from .attention import AttentionConfig, ConfigError
from .complexity import METHODS, Geometry, bench, table_rows, to_csv
from .formats import FormatError, ensure_dir, read_btf, write_btf, write_pgm
from .tensor import backend


def _geometry(text: str) -> tuple[int, int, int]:
    try:
        c, h, w = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected C,H,W integers, got {text!r}") from None
    if min(c, h, w) < 1:
        raise argparse.ArgumentTypeError("geometry entries must be >= 1")
    return c, h, w


def _pixel(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ROW,COL integers, got {text!r}") from None
    return r, c


def _axis(text: str) -> tuple[str, list[str]]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected NAME=v1,v2,..., got {text!r}")
    name, values = text.split("=", 1)
    values = [v for v in values.split(",") if v]
    if not values:
        raise argparse.ArgumentTypeError(f"axis {name!r} has no values")
    return name.strip(), values


def _attention_flags(p, block=9, stride=6, layers=2):
    p.add_argument("--block-size", type=int, default=block)
    p.add_argument("--stride", type=int, default=stride)
    p.add_argument("--layers", type=int, default=layers)
    p.add_argument("--update-mode", choices=att.UPDATE_MODES, default=att.SEQUENTIAL)
    p.add_argument("--share-params", action="store_true")


def _config(args) -> AttentionConfig:
    return AttentionConfig(args.block_size, args.stride, layers=args.layers,
                           update_mode=args.update_mode, share_params=args.share_params, seed=args.seed)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="oracle-equivalence, invariant and gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--csv", help="also write the gradient reports as CSV")

    p = sub.add_parser("counts", help="interaction counts for every method")
    p.add_argument("--geometry", type=_geometry, default=(64, 128, 128))
    p.add_argument("--block-size", type=int, default=36)
    p.add_argument("--stride", type=int, default=24)
    p.add_argument("--layers", type=int, default=2)

    p = sub.add_parser("bench", help="wall-clock forward timings (single-threaded by default)")
    p.add_argument("--geometry", type=_geometry, default=(64, 128, 128))
    p.add_argument("--block-size", type=int, default=36)
    p.add_argument("--stride", type=int, default=24)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--methods", default="blockwise,global-sa,cca")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default: stdout)")

    for name, help_text in (("train", "train one U-net and evaluate Dice"),
                            ("ablate", "one-factor ablation table")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", required=True)
        p.add_argument("--epochs", type=int, default=30)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--lr", type=float, default=2e-4)
        p.add_argument("--batch-size", type=int, default=8)
        p.add_argument("--n-train", type=int, default=48)
        p.add_argument("--n-test", type=int, default=48)
        p.add_argument("--placement", choices=("none", "penultimate", "last"), default="penultimate")
        _attention_flags(p)
        if name == "ablate":
            p.add_argument("--axis", type=_axis, action="append", required=True,
                           help="e.g. layers=1,2,3 or placement=none,penultimate,last")

    p = sub.add_parser("attnmap", help="attention heat maps (SAB, DAB, global) for one query pixel")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene-seed", type=int, default=0)
    p.add_argument("--scene", help="BTF1 image [1,64,64]; overrides --scene-seed")
    p.add_argument("--pixel", type=_pixel, help="query pixel in attention-feature coordinates (default: centre)")
    p.add_argument("--out", required=True)
    return parser


def cmd_verify(args) -> int:
    from .verify import run_verify, verify_text
    from .gradcheck import reports_csv

    checks, reports = run_verify(args.seed, args.instances)
    print(verify_text(checks, reports))
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(reports_csv(reports))
    failed = [c.name for c in checks if not c.passed] + [r.op for r in reports if not r.passed]
    if failed:
        print("\nFAILED: " + ", ".join(failed))
        return 1
    print("\nall checks passed")
    return 0


def cmd_counts(args) -> int:
    c, h, w = args.geometry
    g = Geometry(c, h, w, args.block_size, args.stride, args.layers)
    sys.stdout.write(to_csv(table_rows(g)))
    return 0


def cmd_bench(args) -> int:
    c, h, w = args.geometry
    g = Geometry(c, h, w, args.block_size, args.stride, args.layers)
    methods = [m for m in args.methods.split(",") if m]
    if args.reps < 5:
        raise ConfigError("--reps must be at least 5")
    for m in methods:
        if m not in METHODS or m in ("dan", "psa"):
            raise ConfigError(f"no executable kernel for {m!r}")
    text = bench(methods, g, args.reps, args.seed)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _train_config(args, cfg):
    from .segnet.train import TrainConfig

    return TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
                       attention=cfg, placement=args.placement)


def cmd_train(args) -> int:
    from .segnet.ablation import rows_to_csv
    from .segnet.scenes import generate_split
    from .segnet.train import evaluate, train
    from .segnet.unet import UNet

    cfg = _config(args) if args.placement != "none" else None
    train_scenes, test_scenes = generate_split(args.n_train, args.n_test, args.seed)
    model = UNet(args.placement, cfg, seed=args.seed)
    result = train(model, _train_config(args, cfg), train_scenes)
    out = ensure_dir(args.out)
    model.save(os.path.join(out, "checkpoint"))
    with open(os.path.join(out, "loss.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "mean_loss"])
        writer.writerows([[i, f"{loss:.10f}"] for i, loss in enumerate(result.losses)])
    report = evaluate(model, test_scenes)
    rows = []
    for k, mean, sd in zip(report.classes, report.mean, report.sd):
        rows.append({"class": k, "dsc_mean": f"{mean:.6f}", "dsc_sd": f"{sd:.6f}"})
    with open(os.path.join(out, "dice.csv"), "w") as fh:
        fh.write(rows_to_csv(rows))
    print(f"trained {args.epochs} epochs; mean DSC per class: "
          + ", ".join(f"{k}={m:.3f}" for k, m in zip(report.classes, report.mean)))
    return 0


def cmd_ablate(args) -> int:
    from .segnet.ablation import ablation_run
    from .segnet.scenes import generate_split

    base = _config(args)
    train_scenes, test_scenes = generate_split(args.n_train, args.n_test, args.seed)
    axes = dict(args.axis)
    text = ablation_run(axes, train_scenes, test_scenes, _train_config(args, base), base,
                        log=lambda row: print(f"{row['axis']}={row['value']}: ellipse DSC {row['ellipse_mean']}",
                                              file=sys.stderr))
    ensure_dir(os.path.dirname(os.path.abspath(args.out)))
    with open(args.out, "w") as fh:
        fh.write(text)
    return 0


def cmd_attnmap(args) -> int:
    from .segnet.scenes import generate_scene
    from .segnet.unet import UNet

    model = UNet.load(args.checkpoint)
    if model.cfg is None:
        raise ValueError("checkpoint has no attention module")
    if args.scene:
        image = read_btf(args.scene)
        if image.shape != (1, 64, 64):
            raise FormatError(f"{args.scene}: expected a [1,64,64] image, got {image.shape}")
    else:
        image = generate_scene(args.scene_seed).image
    attn = model.modules["attn"]
    with backend("blas"):
        model.forward(image[None], training=False, keep_beta=True)
        out = attn.last_outputs[0]
        feature = attn.last_inputs[0]
        h, w = out.shape
        pixel = args.pixel or (h // 2, w // 2)
        maps = {"sab": att.extract_attention_map(out, pixel, layer=0)}
        if len(out.beta) > 1:
            maps["dab"] = att.extract_attention_map(out, pixel)
        g = att.global_self_attention(feature, attn.layer_params()[0], keep_beta=True)
        maps["global"] = att.extract_attention_map(g, pixel)
    dest = ensure_dir(args.out)
    for name, m in maps.items():
        write_pgm(os.path.join(dest, f"{name}.pgm"), m)
        write_btf(os.path.join(dest, f"{name}.btf"), m)
    # each panel normalised separately, one-pixel separator
    panels = []
    for m in maps.values():
        lo, hi = m.min(), m.max()
        panels.append((m - lo) / (hi - lo) if hi > lo else np.zeros_like(m))
        panels.append(np.ones((h, 1)))
    write_pgm(os.path.join(dest, "side_by_side.pgm"), np.hstack(panels[:-1]) * 255.0, normalize=False)
    print(f"wrote {', '.join(maps)} maps for pixel {pixel} to {dest}")
    return 0


COMMANDS = {"verify": cmd_verify, "counts": cmd_counts, "bench": cmd_bench, "train": cmd_train,
            "ablate": cmd_ablate, "attnmap": cmd_attnmap}


def _thread_limit():
    threads = os.environ.get("BLOCKATTN_THREADS")
    if threads is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(threads))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"blockattn {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (OSError, FormatError, ValueError, KeyError) as exc:
        print(f"blockattn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
