"""Command-line interface: ``qwt <subcommand> ...``.

Exit codes: 0 on success, 2 on usage errors (bad flags, invalid combinations),
1 on runtime errors. ``QWT_SEED`` supplies the seed when ``--seed`` is absent.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

from .errors import ConfigError, QwtError
from .modelfile import _default_mode, load_model, save_model, set_reference
from .netgraph import ARCHS, ArchConfig, BlockNetwork, Mode, build_network
from .pipeline import (CALIB_SIZE, DatasetConfig, FinetuneConfig, TrainConfig, compensate_model, evaluate, finetune,
                       make_dataset, quantize_model, sample_calibration, train_toy)
from .quantizer import DEFAULT_PERCENTILE, SUPPORTED_BITS, QuantScheme

log = logging.getLogger("qwt")

CSV_COLUMNS = ("model", "method", "wbits", "abits", "size_mb", "top1")


class UsageError(Exception):
    pass


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("QWT_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"QWT_SEED must be an integer, got {env!r}") from None


def _atomic_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        _default_mode(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path, obj):
    _atomic_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def dataset_for(net: BlockNetwork):
    cfg = net.meta.get("dataset")
    if cfg is None:
        raise ConfigError("model file does not record its dataset; it was not produced by train-toy")
    return make_dataset(DatasetConfig(**cfg))


def _calib(net: BlockNetwork, n: int, seed: int):
    return sample_calibration(dataset_for(net), n, seed)


# ---------------------------------------------------------------- commands


def cmd_train_toy(args) -> int:
    seed = _seed(args)
    arch = args.arch.replace("-", "_")
    kw = {"arch": arch, "depth": args.depth, "width": args.width, "classes": args.classes}
    if args.heads is not None:
        kw["heads"] = args.heads
    cfg = ArchConfig(**kw)
    data_cfg = DatasetConfig(kind=args.dataset, classes=args.classes, dim=cfg.input_dim, seed=seed)
    ds = make_dataset(data_cfg)
    net = train_toy(build_network(cfg, seed), ds, TrainConfig(epochs=args.epochs, lr=args.lr, seed=seed))
    net.meta["dataset"] = dataclasses.asdict(data_cfg)
    net.meta["seed"] = seed
    top1 = evaluate(net, ds, Mode.FP).top1
    net.meta["train"]["test_top1"] = top1
    save_model(net, args.out)
    print(json.dumps({"top1": top1}, sort_keys=True))
    return 0


def cmd_quantize(args) -> int:
    seed = _seed(args)
    net = load_model(args.model)
    if net.state is not Mode.FP:
        raise UsageError(f"quantize expects an FP model, got state {net.state.value}")
    scheme = QuantScheme(args.wbits, args.abits, args.observer, args.q)
    q = quantize_model(net, scheme, _calib(net, args.calib_n, seed))
    q.meta["quantize"] = {"calib_n": args.calib_n, "seed": seed}
    set_reference(q, args.model)
    save_model(q, args.out)
    return 0


def cmd_compensate(args) -> int:
    seed = _seed(args)
    net = load_model(args.model)
    if net.state is not Mode.QUANT:
        raise UsageError(f"compensate expects a quantized model, got state {net.state.value}")
    structure = "dense" if args.structure == "dense" else "block_diagonal"
    if structure == "block_diagonal":
        bad = [i for i, b in enumerate(net.blocks) if b.d_in != b.d_out or b.d_in % args.group]
        if bad:
            raise UsageError(f"--structure groupwise needs square blocks divisible by --group {args.group}; "
                             f"blocks {bad} are not")
    out, report = compensate_model(net, _calib(net, args.calib_n, seed), structure, args.group)
    out.meta["compensate"] = {"calib_n": args.calib_n, "seed": seed}
    save_model(out, args.out)
    if args.report:
        _write_json(args.report, evaluate(out, dataset_for(out)).to_json_dict())
    return 0


def cmd_finetune(args) -> int:
    seed = _seed(args)
    net = load_model(args.model)
    if net.state is not Mode.QUANT_QWT:
        raise UsageError(f"finetune expects a compensated model, got state {net.state.value}")
    teacher = load_model(args.teacher) if args.teacher else None
    if teacher is None and not net.fp_available:
        raise ConfigError("FP reference model not found; pass --teacher")
    cfg = FinetuneConfig(epochs=args.epochs, lr=args.lr, seed=seed)
    out, _ = finetune(net, dataset_for(net), cfg, teacher=teacher)
    save_model(out, args.out)
    return 0


def cmd_eval(args) -> int:
    net = load_model(args.model)
    rep = evaluate(net, dataset_for(net))
    d = rep.to_json_dict()
    if args.report:
        _write_json(args.report, d)
    print(json.dumps({"top1": d["top1"], "size_mb": d["size_mb"], "mode": d["mode"]}, sort_keys=True))
    return 0


def method_name(net: BlockNetwork) -> str:
    if net.state is Mode.FP:
        return "Full-precision"
    name = net.scheme.method_name if net.scheme is not None else "PTQ"
    if net.state is Mode.QUANT_QWT:
        name += " + QwT*" if "finetune" in net.meta else " + QwT"
    return name


def report_row(path, net: BlockNetwork) -> dict:
    rep = evaluate(net, dataset_for(net))
    wbits = abits = 32
    if net.state is not Mode.FP and net.scheme is not None:
        wbits, abits = net.scheme.weight_bits, net.scheme.act_bits
    return {"model": Path(path).name, "method": method_name(net), "wbits": wbits, "abits": abits,
            "size_mb": f"{rep.size_mb:.4f}", "top1": f"{100 * rep.top1:.2f}"}


def cmd_report(args) -> int:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for path in args.models:
        w.writerow(report_row(path, load_model(path)))
    _atomic_text(args.out, buf.getvalue())
    return 0


# ------------------------------------------------------------------ parser


def _bits(s: str) -> int:
    v = int(s)
    if v not in SUPPORTED_BITS:
        raise argparse.ArgumentTypeError(f"bits must be one of {SUPPORTED_BITS}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qwt", description="Quantize block networks and add linear compensation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def seeded(sp):
        sp.add_argument("--seed", type=int, default=None, help="defaults to $QWT_SEED, then 0")

    t = sub.add_parser("train-toy", help="train an FP toy network")
    t.add_argument("--arch", required=True, choices=[a.replace("_", "-") for a in ARCHS])
    t.add_argument("--depth", type=int, default=3)
    t.add_argument("--width", type=int, default=64)
    t.add_argument("--classes", type=int, default=10)
    t.add_argument("--heads", type=int, default=None)
    t.add_argument("--dataset", choices=["blobs", "spirals"], default="blobs")
    seeded(t)
    t.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    t.add_argument("--lr", type=float, default=TrainConfig.lr)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_toy)

    q = sub.add_parser("quantize", help="post-training quantization")
    q.add_argument("--model", required=True)
    q.add_argument("--wbits", type=_bits, default=8)
    q.add_argument("--abits", type=_bits, default=8)
    q.add_argument("--observer", choices=["minmax", "percentile"], default="minmax")
    q.add_argument("--q", type=float, default=DEFAULT_PERCENTILE)
    q.add_argument("--calib-n", type=int, default=CALIB_SIZE)
    seeded(q)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_quantize)

    c = sub.add_parser("compensate", help="attach closed-form compensation modules")
    c.add_argument("--model", required=True)
    c.add_argument("--structure", choices=["dense", "groupwise"], default="dense")
    c.add_argument("--group", type=int, default=64)
    c.add_argument("--calib-n", type=int, default=CALIB_SIZE)
    seeded(c)
    c.add_argument("--out", required=True)
    c.add_argument("--report")
    c.set_defaults(func=cmd_compensate)

    f = sub.add_parser("finetune", help="tune compensation modules and head")
    f.add_argument("--model", required=True)
    f.add_argument("--epochs", type=int, default=FinetuneConfig.epochs)
    f.add_argument("--lr", type=float, default=FinetuneConfig.lr)
    f.add_argument("--teacher", help="FP model (defaults to the quantized model's reference)")
    seeded(f)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval", help="evaluate on the model's test split")
    e.add_argument("--model", required=True)
    e.add_argument("--report")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="comparison table as CSV")
    r.add_argument("--models", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"qwt {args.command}: {e}", file=sys.stderr)
        return 2
    except (QwtError, OSError, ValueError) as e:
        print(f"qwt {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
