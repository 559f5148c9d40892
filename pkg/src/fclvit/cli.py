"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 data error, 4 protocol error.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path

from . import experiments as ex
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config, parse_float_list
from .errors import ConfigError, FormatError, ProtocolError
from .metrics import top1
from .model import FCLViT
from .tensor import Rng

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PROTOCOL = 0, 2, 3, 4

SUMMARY_HEADER = ["lambda", "alpha", "avg", "last", "params"]


def _summary_rows(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for rec in records:
        s = rec.summary()
        w.writerow([repr(float(rec.lam)), repr(float(rec.alpha)), repr(s.avg), repr(s.last),
                    rec.params])
    return buf.getvalue()


def _write(out_dir, name, text):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(text)


def _pct(x):
    return f"{100.0 * x:.2f}%"


def _load_cfg(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    env = os.environ.get("FCLVIT_THREADS")
    if env:
        try:
            cfg.train.threads = max(1, int(env))
        except ValueError:
            raise ConfigError(f"FCLVIT_THREADS must be an integer, got {env!r}") from None
    return cfg


def _backbone(cfg, args, bench):
    """Pretrained backbone from --checkpoint if it exists, otherwise pretrain now."""
    if args.checkpoint and Path(args.checkpoint).exists():
        model, _, _ = load_checkpoint(args.checkpoint)
        if not model.frozen:
            raise ProtocolError(f"{args.checkpoint} holds an unfrozen backbone")
        if model.heads:
            raise ProtocolError(f"{args.checkpoint} already has task heads; use `eval` on it")
        return model
    model, acc = ex.pretrained_model(cfg, bench[0], bench[1])
    print(f"pretrained backbone: held-out base top-1 {_pct(acc)}")
    return model


def cmd_pretrain(args):
    cfg = _load_cfg(args)
    bench = ex.load_benchmark(cfg)
    model, acc = ex.pretrained_model(cfg, bench[0], bench[1])
    path = Path(args.checkpoint or Path(args.out) / "backbone.ckpt")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, model, extra={"base_top1": acc, "seed": cfg.train.seed})
    print(f"held-out base top-1 {_pct(acc)}; checksum {model.frozen_checksum[:16]}; saved {path}")
    return EXIT_OK


def cmd_run(args):
    cfg = _load_cfg(args)
    bench = ex.load_benchmark(cfg)
    backbone = _backbone(cfg, args, bench)
    record, state, model = ex.run_experiment(cfg, backbone, bench)
    out = Path(args.out)
    _write(out, "accuracy.csv", record.matrix.to_csv())
    _write(out, "summary.csv", _summary_rows([record]))
    _write(out, "run.json", record.to_json() + "\n")
    save_checkpoint(out / "model.ckpt", model, state, extra={"seed": cfg.train.seed})
    s = record.summary()
    print(f"Avg {_pct(s.avg)}  Last {_pct(s.last)}  trainable params {record.params}")
    return EXIT_OK


def cmd_ablate(args):
    cfg = _load_cfg(args)
    if args.lambdas:
        cfg.train.lam = parse_float_list(args.lambdas)[0]
    bench = ex.load_benchmark(cfg)
    backbone = _backbone(cfg, args, bench)
    fcl, plain = ex.tsb_ablation(cfg, backbone, bench)
    out = Path(args.out)
    _write(out, "fcl_accuracy.csv", fcl.matrix.to_csv())
    _write(out, "no_tsb_accuracy.csv", plain.matrix.to_csv())
    text = _summary_rows([fcl, plain]).splitlines()
    rows = ["variant," + text[0], "fcl-vit," + text[1], "no-tsb," + text[2]]
    _write(out, "ablation_summary.csv", "\n".join(rows) + "\n")
    print(f"FCL-ViT  Last {_pct(fcl.summary().last)}  params {fcl.params}")
    print(f"no TSB   Last {_pct(plain.summary().last)}  params {plain.params}")
    return EXIT_OK


def cmd_sweep(args):
    cfg = _load_cfg(args)
    lambdas = parse_float_list(args.lambdas) if args.lambdas else cfg.lambdas
    bench = ex.load_benchmark(cfg)
    backbone = _backbone(cfg, args, bench)
    results = ex.lambda_sweep(cfg, lambdas, backbone, bench)
    out = Path(args.out)
    for lam, rec in results:
        _write(out, f"accuracy_lambda_{lam:g}.csv", rec.matrix.to_csv())
    _write(out, "sweep.csv", _summary_rows([rec for _, rec in results]))
    for lam, rec in results:
        s = rec.summary()
        print(f"lambda {lam:<10g} Avg {_pct(s.avg)}  Last {_pct(s.last)}")
    return EXIT_OK


def cmd_eval(args):
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    cfg = _load_cfg(args)
    model, _, _ = load_checkpoint(args.checkpoint)
    _, _, split = ex.load_benchmark(cfg)
    lines = ["task_index,top1"]
    for head in model.heads:
        task = next((t for t in split if tuple(t.classes) == tuple(head.class_list)), None)
        if task is None:
            raise ProtocolError(f"no task in the configured split has classes {head.class_list}")
        acc = top1(model, task.test, head.task_index, threads=cfg.train.threads)
        lines.append(f"{head.task_index},{acc!r}")
        print(f"task {head.task_index} classes {list(head.class_list)}: top-1 {_pct(acc)}")
    if args.out:
        _write(Path(args.out), "eval.csv", "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_info(args):
    cfg = _load_cfg(args)
    if args.checkpoint:
        model, state, _ = load_checkpoint(args.checkpoint)
    else:
        model = FCLViT(cfg.model, Rng(cfg.train.seed))
        d = cfg.data
        for t in range(d.task_classes // d.classes_per_task):
            model.add_task_head(range(t * d.classes_per_task, (t + 1) * d.classes_per_task))
    mc = model.config
    print("config:")
    for line in cfg.to_text().splitlines():
        print("  " + line)
    tsb = sum(p.size for p in model.tsb_params())
    heads = sum(h.layer.weight.size for h in model.heads)
    print(f"tokens N = {mc.tokens}, depth d = {mc.depth}, dim D = {mc.dim}, heads h = {mc.heads}")
    print(f"feedback parameters (d*2*D^2): {tsb}")
    print(f"head parameters (sum D*|C_k| over {len(model.heads)} heads): {heads}")
    print(f"trainable parameters: {model.param_census()}")
    print(f"backbone parameters: {sum(p.size for p in model.backbone_params())}")
    print(f"backbone checksum: {model.backbone_checksum()}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="fclvit", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    specs = {
        "pretrain": (cmd_pretrain, "pretrain and freeze the backbone, save a checkpoint"),
        "run": (cmd_run, "full continual experiment; writes JSON, CSV and a checkpoint"),
        "ablate-tsb": (cmd_ablate, "feedback model vs. no-TSB ViT with EWC on every weight"),
        "sweep-lambda": (cmd_sweep, "one continual run per lambda, one CSV row each"),
        "eval": (cmd_eval, "evaluate a checkpoint on the configured task split"),
        "info": (cmd_info, "print config, parameter census and backbone checksum"),
    }
    for name, (fn, help_) in specs.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value experiment file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default="out")
        p.add_argument("--checkpoint")
        p.add_argument("--lambdas", help="comma-separated lambda list")
        p.set_defaults(fn=fn)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ProtocolError as e:
        print(f"protocol error: {e}", file=sys.stderr)
        return EXIT_PROTOCOL
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
