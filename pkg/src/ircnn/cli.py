"""Command-line interface: train, eval, gradcheck, params.

Exit code 0 on success; on failure, one machine-parseable line
``error category=<category>: <message>`` on stderr and a category-specific
nonzero exit code. The data directory comes from --data-dir or, when the flag
is absent, the IRCNN_DATA_DIR environment variable.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, IrcnnError
from .gradcheck import check_graph_gradients, randomize_for_check
from .models import ModelConfig, build_model, count_params, make_preset
from .train import RunConfig, evaluate_checkpoint, run_training

_EXIT_CODES = {"config": 2, "data": 3, "numerics": 4, "init": 5, "internal": 6}


def _data_dir(args) -> str:
    if args.data_dir:
        return args.data_dir
    env = os.environ.get("IRCNN_DATA_DIR")
    if env:
        return env
    raise ConfigError("no data directory: pass --data-dir or set IRCNN_DATA_DIR")


def _load_model_config(config: str | None, variant: str | None) -> ModelConfig:
    if config is None:
        cfg = make_preset("tiny")
    elif Path(config).exists():
        cfg = ModelConfig.load(config)
    else:
        cfg = make_preset(config)
    if variant:
        cfg = cfg.with_variant(variant)
    return cfg


def cmd_train(args) -> int:
    if not args.config:
        raise ConfigError("train requires --config pointing to a run config JSON")
    run_cfg = RunConfig.load(args.config)
    if args.seed is not None:
        run_cfg.seed = args.seed
    if args.variant:
        run_cfg.variant = args.variant
    if args.out_dir:
        run_cfg.out_dir = args.out_dir
    run_cfg.validate()
    result = run_training(run_cfg, _data_dir(args))
    if result.lsuv_report is not None:
        print(result.lsuv_report)
    last = result.rows[-1]
    print(f"trained {last.epoch} epochs: train_loss={last.train_loss:.4f} "
          f"val_acc={last.val_acc:.4f}")
    print(f"metrics: {result.metrics_path}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    result, _ = evaluate_checkpoint(args.checkpoint, args.split, _data_dir(args))
    print(f"split={args.split} loss={result.loss:.6f} accuracy={result.accuracy:.6f} "
          f"error_percent={result.error_percent:.4f}")
    for cls in sorted(result.per_class_accuracy):
        print(f"class {cls:3d} accuracy={result.per_class_accuracy[cls]:.6f}")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps({
            "split": args.split, "loss": result.loss, "accuracy": result.accuracy,
            "error_percent": result.error_percent,
            "per_class_accuracy": result.per_class_accuracy}, indent=2) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    cfg = _load_model_config(args.config, args.variant)
    graph = build_model(cfg, dtype=np.float64)
    for node in graph.nodes.values():
        if node.kind == "dropout":
            node.attrs["rate"] = 0.0
    randomize_for_check(graph, seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.standard_normal((2, cfg.in_channels, 8, 8))
    labels = rng.integers(0, cfg.classes, size=2)
    report = check_graph_gradients(graph, x, labels, seed=seed)
    print(f"variant={cfg.variant} time_steps={cfg.pairs[0][0].t} "
          f"params={count_params(graph)[0]}")
    print(report.to_text())
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(json.dumps({
            "passed": report.passed,
            "rows": [{"name": r.name, "coords": r.coords_checked,
                      "max_rel_err": r.max_rel_err, "passed": r.passed}
                     for r in report.rows]}, indent=2) + "\n")
    return 0


def cmd_params(args) -> int:
    cfg = _load_model_config(args.config, args.variant)
    graph = build_model(cfg)
    total, rows = count_params(graph)
    print(f"variant={cfg.variant} preset={cfg.preset}")
    for name, size in rows:
        print(f"{name:28s} {size:10d}")
    print(f"{'total':28s} {total:10d}")
    if args.compare_variants:
        counts = {v: count_params(build_model(cfg.with_variant(v)))[0]
                  for v in ("ircnn", "ein", "eirn")}
        print(f"ircnn={counts['ircnn']} ein={counts['ein']} eirn={counts['eirn']} "
              f"eirn_delta={counts['eirn'] - counts['ein']}")
        if counts["ircnn"] != counts["ein"]:
            raise ConfigError(f"parameter parity violated: ircnn={counts['ircnn']} "
                              f"!= ein={counts['ein']}")
        print("parity ircnn == ein: ok")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ircnn",
                                     description="Train and inspect the "
                                                 "inception-recurrent CNN variants.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="config file path (run config for train; "
                                        "model config path or preset name otherwise)")
        p.add_argument("--data-dir", help="dataset directory (or IRCNN_DATA_DIR)")
        p.add_argument("--out-dir", help="output directory")
        p.add_argument("--variant", choices=("ircnn", "ein", "eirn"))
        if seed:
            p.add_argument("--seed", type=int)

    p_train = sub.add_parser("train", help="run a training experiment")
    common(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("split", nargs="?", default="val",
                        choices=("train", "val", "test"))
    common(p_eval)
    p_eval.set_defaults(fn=cmd_eval)

    p_gc = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    common(p_gc)
    p_gc.set_defaults(fn=cmd_gradcheck)

    p_params = sub.add_parser("params", help="parameter count table")
    common(p_params, seed=False)
    p_params.add_argument("--compare-variants", action="store_true")
    p_params.set_defaults(fn=cmd_params)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except IrcnnError as e:
        print(f"error category={e.category}: {e}", file=sys.stderr)
        return _EXIT_CODES.get(e.category, 6)
    except KeyboardInterrupt:
        print("error category=interrupted: training interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
