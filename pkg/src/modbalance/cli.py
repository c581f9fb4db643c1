"""Command-line entry points: gen-data, train, eval, plot.

A JSON config file can seed the train command; flags override its fields.
Relative output paths resolve under $MODBALANCE_OUT_ROOT when set. Exit code
is 0 only on clean completion.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .corpus import generate_corpus, write_corpus
from .metrics import write_report
from .network import NetConfig
from .plots import plot_report, plot_runlog
from .presence import IDT, PDT, MissingProtocol
from .scenes import default_scene_spec
from .training import RunConfig, evaluate_checkpoint, train

OUT_ROOT_ENV = "MODBALANCE_OUT_ROOT"


def resolve_out(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _parse_rates(text: str):
    try:
        return tuple(float(r) for r in text.split(","))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"rates must be comma-separated numbers: {e}")


def _parse_size(text: str):
    parts = text.split("x")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("size must look like 64x64")
    return (int(parts[0]), int(parts[1]))


def cmd_gen_data(args) -> int:
    if args.rates is not None:
        n_modalities = len(args.rates)
        rates = args.rates
    elif args.modalities is not None:
        n_modalities = args.modalities
        rates = tuple(0.0 for _ in range(n_modalities))
    else:
        print("gen-data: provide --rates or --modalities", file=sys.stderr)
        return 2
    if args.mode == PDT:
        rates = tuple(0.0 for _ in range(n_modalities))
    protocol = MissingProtocol(mode=args.mode, target_rates=rates, seed=args.seed)
    spec = default_scene_spec(
        n_modalities=n_modalities,
        n_classes=args.classes,
        image_size=args.size,
        noise_sigma=args.noise,
    )
    samples, presence = generate_corpus(spec, protocol, args.n_samples)
    out = resolve_out(args.out)
    manifest = write_corpus(samples, presence, out, protocol, spec)
    realized = ", ".join(f"{r:.4f}" for r in manifest["realized_missing_rates"])
    print(f"wrote {args.n_samples} samples to {out} (realized missing rates: {realized})")
    return 0


def _config_from_args(args) -> RunConfig:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    net_fields = base.pop("net", {})
    overrides = {
        "corpus": args.corpus,
        "out_dir": args.out,
        "epochs": args.epochs,
        "seed": args.seed,
        "lr": args.lr,
        "weight_decay": args.weight_decay,
        "val_fraction": args.val_fraction,
    }
    for key, value in overrides.items():
        if value is not None:
            base[key] = value
    if args.no_dmaf:
        base["use_dmaf"] = False
    if args.no_distill:
        base["use_distill"] = False
    if args.no_dtm:
        base["use_dtm"] = False
    if args.lambdas is not None:
        base["lambdas"] = args.lambdas
    net_overrides = {
        "n_modalities": args.modalities,
        "n_classes": args.classes,
        "n_levels": args.levels,
        "base_channels": args.base_channels,
        "dtype": args.dtype,
    }
    for key, value in net_overrides.items():
        if value is not None:
            net_fields[key] = value
    merged = {**RunConfig(corpus="unset").to_dict(), **base}
    merged["net"] = {**NetConfig().to_dict(), **net_fields}
    if not merged.get("corpus") or merged["corpus"] == "unset":
        raise ValueError("train needs --corpus (or a config file with one)")
    merged["out_dir"] = str(resolve_out(merged.get("out_dir") or "run"))
    return RunConfig.from_dict(merged)


def cmd_train(args) -> int:
    config = _config_from_args(args)
    result = train(config, resume_from=args.resume)
    print(f"trained {result.steps} steps")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"runlog: {result.runlog_path}")
    return 0


def cmd_eval(args) -> int:
    report = evaluate_checkpoint(args.checkpoint, args.corpus,
                                 combinations=None, hd_percentile=args.hd_percentile)
    out = resolve_out(args.out)
    paths = write_report(report, out)
    print(f"wrote {paths['combinations']} ({len(report.rows)} combination rows)")
    print(f"wrote {paths['per_sample']}")
    return 0


def cmd_plot(args) -> int:
    wrote = []
    if args.runlog:
        wrote += plot_runlog(args.runlog, resolve_out(args.out))
    if args.report:
        wrote += plot_report(args.report, resolve_out(args.out))
    if not wrote:
        print("plot: provide --runlog and/or --report", file=sys.stderr)
        return 2
    for path in wrote:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modbalance",
        description="incomplete multi-modal segmentation with dynamic rebalancing",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic corpus")
    gen.add_argument("--out", required=True)
    gen.add_argument("--n-samples", type=int, required=True)
    gen.add_argument("--size", type=_parse_size, default=(64, 64))
    gen.add_argument("--classes", type=int, default=3)
    gen.add_argument("--mode", choices=[PDT, IDT], default=PDT)
    gen.add_argument("--rates", type=_parse_rates, default=None,
                     help="comma-separated per-modality missing rates; defines M")
    gen.add_argument("--modalities", type=int, default=None,
                     help="modality count when --rates is omitted (pdt)")
    gen.add_argument("--noise", type=float, default=0.08)
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(func=cmd_gen_data)

    tr = sub.add_parser("train", help="train a model on a corpus")
    tr.add_argument("--config", default=None, help="JSON run config; flags override")
    tr.add_argument("--corpus", default=None)
    tr.add_argument("--out", default=None)
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--lr", type=float, default=None)
    tr.add_argument("--weight-decay", type=float, default=None)
    tr.add_argument("--val-fraction", type=float, default=None)
    tr.add_argument("--lambdas", type=_parse_rates, default=None)
    tr.add_argument("--modalities", type=int, default=None)
    tr.add_argument("--classes", type=int, default=None)
    tr.add_argument("--levels", type=int, default=None)
    tr.add_argument("--base-channels", type=int, default=None)
    tr.add_argument("--dtype", choices=["float64", "float32"], default=None)
    tr.add_argument("--no-dmaf", action="store_true")
    tr.add_argument("--no-distill", action="store_true")
    tr.add_argument("--no-dtm", action="store_true")
    tr.add_argument("--resume", default=None)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint over modality combinations")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--combinations", choices=["full"], default="full")
    ev.add_argument("--hd-percentile", type=float, default=100.0)
    ev.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="render curves and tables from logs/reports")
    pl.add_argument("--runlog", default=None)
    pl.add_argument("--report", default=None)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # fail loudly but with a clean message and exit code
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
