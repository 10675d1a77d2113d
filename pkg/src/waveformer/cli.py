"""
Command-line interface.

Exit codes: 0 success, 2 usage / unreadable data / bad config, 3 training
diverged, 4 checkpoint corrupt (CRC, magic, version), 5 checkpoint tensor
does not match its config.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .bench import benchmark, benchmark_paired, reports_csv
from .config import RunConfig
from .errors import (CheckpointError, ConfigError, DivergenceError, InputError,
                     ShapeMismatchError)
from .model import WaveFormer, init_params, param_breakdown, param_count
from .quant import QuantizedTensor, quantize_model
from .signals import CsvSchema, load_csv, make_windows, save_csv, split_indices, synth_gestures
from .tensor import Tensor
from .training import (ablation_run, ablation_table, evaluate, history_csv, train)

log = logging.getLogger("waveformer")

CONFIG_ENTRY = "__config__"
REFERENCE_PARAMS = 3_100_000  # reported size of the default model

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_CORRUPT, EXIT_SHAPE = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def resolve_config(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    """Defaults < --config file < --set / explicit flags."""
    cfg = base or RunConfig()
    if getattr(args, "config", None):
        cfg = RunConfig.from_file(args.config, cfg)
    overrides: dict[str, str | bool | int] = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "no_waveletconv", False):
        overrides["use_waveletconv"] = False
    if getattr(args, "no_rope", False):
        overrides["use_rope"] = False
    return cfg.override(overrides) if overrides else cfg


def load_windows(args: argparse.Namespace, cfg: RunConfig):
    m = cfg.model
    if args.synthetic:
        recs = synth_gestures(m.num_classes, m.channels, cfg.data.per_class, seed=cfg.train.seed)
    elif args.data:
        try:
            recs = load_csv(args.data, CsvSchema(num_classes=m.num_classes, channels=m.channels))
        except OSError as exc:
            raise InputError(f"cannot read {args.data}: {exc}") from exc
    else:
        raise UsageError("give a data CSV path or --synthetic")
    w = make_windows(recs, m.window, cfg.data.overlap, cfg.data.normalize, dtype=m.np_dtype)
    return w, split_indices(w.labels, cfg.train.seed)


def model_from_checkpoint(path: str, overrides: RunConfig | None = None
                          ) -> tuple[WaveFormer, RunConfig]:
    entries = checkpoint.load(path)
    text = entries.pop(CONFIG_ENTRY, None)
    if not isinstance(text, str):
        raise CheckpointError(f"{path} has no embedded run configuration")
    cfg = RunConfig.from_text(text)
    expected = init_params(cfg.model, cfg.ablation)
    params: dict[str, object] = {}
    for name, ref in expected.items():
        if name not in entries:
            raise ShapeMismatchError(name, ref.shape, ())
        val = entries.pop(name)
        if val.shape != ref.shape:
            raise ShapeMismatchError(name, ref.shape, tuple(val.shape))
        if isinstance(val, QuantizedTensor):
            params[name] = val
        else:
            params[name] = Tensor(val.astype(cfg.model.np_dtype), requires_grad=True, name=name)
    if entries:
        extra = sorted(entries)[0]
        raise ShapeMismatchError(extra, (), tuple(np.shape(entries[extra])))
    return WaveFormer(cfg.model, cfg.ablation, params), cfg


def checkpoint_entries(model: WaveFormer, cfg: RunConfig) -> dict[str, object]:
    entries: dict[str, object] = {CONFIG_ENTRY: cfg.to_text()}
    for name, p in model.params.items():
        entries[name] = p if isinstance(p, QuantizedTensor) else p.data
    return entries


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    windows, split = load_windows(args, cfg)
    model = WaveFormer(cfg.model, cfg.ablation, seed=cfg.train.seed)
    res = train(model, windows.subset(split.train).batch(), windows.subset(split.val).batch(),
                cfg.train)
    out = Path(args.out or "waveformer.wfck")
    checkpoint.save(out, checkpoint_entries(model, cfg))
    hist_path = Path(args.history) if args.history else out.with_suffix(".history.csv")
    hist_path.write_text(history_csv(res.history), encoding="utf-8")
    test = evaluate(model, windows.subset(split.test).batch()) if len(split.test) else None
    print(f"best epoch {res.best_epoch} of {res.epochs_run}, val acc {res.best_val_acc:.4f}")
    if test is not None:
        print(f"test {test.summary()}")
    print(f"checkpoint: {out}\nhistory: {hist_path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model, cfg = model_from_checkpoint(args.checkpoint)
    cfg = resolve_config(args, cfg)
    windows, split = load_windows(args, cfg)
    if args.precision == "int8" and not model.is_quantized:
        model = quantize_model(model)
    idx = {"train": split.train, "val": split.val, "test": split.test,
           "all": np.arange(len(windows))}[args.split]
    rep = evaluate(model, windows.subset(idx).batch())
    rows = ["epoch,split,loss,acc,f1,auroc",
            f"final,{args.split},{rep.loss!r},{rep.accuracy!r},{rep.macro_f1!r},{rep.auroc_text}"]
    _write("\n".join(rows) + "\n", args.out)
    log.info("%s", rep.summary())
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    if args.checkpoint:
        model, _ = model_from_checkpoint(args.checkpoint)
    else:
        cfg = resolve_config(args)
        model = WaveFormer(cfg.model, cfg.ablation, seed=cfg.train.seed)
    if args.precision == "both":
        if model.is_quantized:
            raise UsageError("--precision both needs a floating-point checkpoint")
        reports = list(benchmark_paired(model, args.iters, args.warmup, args.batch, args.threads))
    else:
        reports = [benchmark(model, args.precision, args.iters, args.warmup, args.batch,
                             args.threads)]
    _write(reports_csv(reports), args.out)
    for r in reports:
        print(r.pretty(), file=sys.stderr)
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    windows, split = load_windows(args, cfg)
    rows = ablation_run(windows, split, cfg.model, cfg.train)
    _write(ablation_table(rows), args.out)
    return EXIT_OK


def cmd_params(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    params = init_params(cfg.model, cfg.ablation)
    total = sum(p.size for p in params.values())
    formula = param_count(cfg.model, cfg.ablation)
    if total != formula:  # pragma: no cover - guards the closed form
        raise ConfigError(f"enumerated {total} != closed form {formula}")
    lines = [f"total {total}"]
    lines += [f"  {k} {v}" for k, v in param_breakdown(params).items()]
    lines.append(f"reference figure {REFERENCE_PARAMS} (this config is "
                 f"{total / REFERENCE_PARAMS:.3f}x of it)")
    _write("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    m = cfg.model
    recs = synth_gestures(m.num_classes, m.channels, cfg.data.per_class, seed=cfg.train.seed)
    out = args.out or "synthetic.csv"
    save_csv(out, recs)
    print(f"wrote {len(recs)} recordings to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, data: bool = False) -> None:
    p.add_argument("--config", metavar="PATH", help="flat key = value run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one configuration field (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-waveletconv", action="store_true", help="bypass the WaveletConv module")
    p.add_argument("--no-rope", action="store_true", help="replace rotary embedding by identity")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", metavar="PATH")
    if data:
        p.add_argument("data", nargs="?", help="recording CSV (subject,trial,label,ch0..)")
        p.add_argument("--synthetic", action="store_true", help="use the synthetic gesture set")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="waveformer", description=__doc__.split("\n")[1])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _common(p, data=True)
    p.add_argument("--history", metavar="PATH", help="history CSV (default: next to --out)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    _common(p, data=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--precision", choices=("fp32", "int8"), default="fp32")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="latency / throughput benchmark")
    p.add_argument("checkpoint", nargs="?")
    _common(p)
    p.add_argument("--precision", choices=("fp32", "int8", "both"), default="fp32")
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--batch", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="train full / -WaveletConv / -RoPE variants")
    _common(p, data=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("params", help="exact parameter count per module")
    _common(p)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("synth", help="write the synthetic gesture set as CSV")
    _common(p)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with_threads = getattr(args, "threads", 1)
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=with_threads):
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"waveformer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ShapeMismatchError as exc:
        print(f"waveformer: checkpoint/config mismatch: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except CheckpointError as exc:
        print(f"waveformer: bad checkpoint: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except DivergenceError as exc:
        print(f"waveformer: training diverged: {exc} (tensor: {exc.tensor_name})",
              file=sys.stderr)
        return EXIT_DIVERGED
    except (InputError, ConfigError, OSError) as exc:
        print(f"waveformer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
