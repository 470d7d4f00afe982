"""Command-line entry point: ``cmunet {train,eval,infer,gradcheck,ablate,synth}``.

Exit codes: 0 success, 1 usage/config error, 2 data or checkpoint error,
3 numeric failure (non-finite values or a failed gradient check).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Sequence

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _thread_limit():
    """Pin BLAS threads when CMUNET_THREADS is set (1 = reference mode)."""
    raw = os.environ.get("CMUNET_THREADS")
    if not raw:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(raw))


def _overrides(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v
    return out


def _run_config(args):
    from cmunet.config import RunConfig, load_config, parse_overrides

    cfg = load_config(args.config) if args.config else RunConfig()
    changes = parse_overrides(_overrides(args.set or []))
    for key in ("seed", "data", "out", "epochs"):
        val = getattr(args, key, None)
        if val is not None:
            changes[key] = val
    return cfg.replace(**changes)


def cmd_train(args) -> int:
    from cmunet.data import load_dataset
    from cmunet.training import train

    cfg = _run_config(args)
    if not cfg.data:
        raise ValueError("no dataset given (--data or data= in the config)")
    samples = load_dataset(cfg.data, cfg.input_size, cfg.in_channels)
    res = train(cfg, samples, cfg.out, with_optimizer=args.with_optimizer,
                progress=lambda r: print(f"epoch {r.epoch:4d}  loss {r.train_loss:.5f}  "
                                         f"val IoU {100 * r.val_iou:.2f}  val F1 {100 * r.val_f1:.2f}"))
    print(f"best val IoU {100 * max(res.best_iou, 0):.2f} at epoch {res.best_epoch}; checkpoints in {cfg.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from cmunet.checkpoint import load_checkpoint, restore_model
    from cmunet.data import load_dataset
    from cmunet.metrics import aggregate_runs, format_percent, per_image_csv, text_table
    from cmunet.training import evaluate

    runs, rows = [], []
    for path in args.checkpoint:
        ckpt = load_checkpoint(path)
        model = restore_model(ckpt)
        cfg = ckpt.config
        samples = load_dataset(args.data, cfg.input_size, cfg.in_channels)
        threshold = cfg.threshold if args.threshold is None else args.threshold
        per_image, summary = evaluate(model, samples, threshold, cfg.batch_size)
        runs.append(summary)
        rows.append((Path(path).name, {k: format_percent(v) for k, v in summary.scores().items()}))
        if args.csv:
            target = Path(args.csv)
            if len(args.checkpoint) > 1:
                target = target.with_name(f"{target.stem}_{len(runs) - 1}{target.suffix}")
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(per_image_csv([s.id for s in samples], per_image, summary))
    if len(runs) > 1:
        agg = aggregate_runs(runs)
        rows.append(("mean±std", {k: agg.formatted(k) for k in agg.mean}))
    print(text_table(rows, label="checkpoint"))
    return EXIT_OK


def cmd_infer(args) -> int:
    from cmunet.checkpoint import load_checkpoint, restore_model
    from cmunet.training import infer_mask, save_mask

    ckpt = load_checkpoint(args.checkpoint)
    model = restore_model(ckpt)
    threshold = ckpt.config.threshold if args.threshold is None else args.threshold
    save_mask(infer_mask(model, args.image, threshold), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from cmunet.gradsuite import format_rows, run_gradcheck

    rows = run_gradcheck(args.op, eps=args.eps, seed=args.seed)
    print(format_rows(rows))
    return EXIT_OK if all(r.passed for r in rows) else EXIT_NUMERIC


def cmd_ablate(args) -> int:
    from cmunet.data import load_dataset
    from cmunet.metrics import text_table
    from cmunet.training import ablate

    cfg = _run_config(args)
    if not cfg.data:
        raise ValueError("no dataset given (--data or data= in the config)")
    samples = load_dataset(cfg.data, cfg.input_size, cfg.in_channels)
    rows = ablate(cfg, samples, seeds=args.seeds, out_dir=args.out)
    table = text_table([(r.name, {k: r.summary.formatted(k) for k in r.summary.mean}) for r in rows], label="variant")
    print(table)
    for r in rows:
        print(f"{r.name}: parameters={r.parameters} seeds={','.join(map(str, r.seeds))}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from cmunet.data import write_synthetic

    ids = write_synthetic(args.out, args.n, args.size, args.seed, circles=args.circles)
    print(f"wrote {len(ids)} samples to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cmunet", description="CMU-Net segmentation: train, evaluate, infer, verify.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_opts(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--data", help="dataset root with images/ and masks/")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    sp = sub.add_parser("train", help="train one model")
    run_opts(sp)
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--with-optimizer", action="store_true", help="store Adam state in checkpoints")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate checkpoints on a dataset")
    sp.add_argument("--checkpoint", nargs="+", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--csv", help="write per-image metrics here")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="write a predicted mask PNG")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--threshold", type=float)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    sp.add_argument("--op", default="all", help="op name, 'ops', 'model' or 'all'")
    sp.add_argument("--eps", type=float, default=1e-3)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="train baseline / +convmixer / +convmixer+msag")
    run_opts(sp)
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    sp.add_argument("--out", help="keep per-run artifacts here")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("synth", help="write a synthetic ellipse dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=8)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--circles", action="store_true", help="draw circles instead of ellipses")
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    from cmunet.errors import CheckpointError, ConfigError, DataError, DimensionError, NumericError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, KeyError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
