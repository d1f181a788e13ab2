"""Command line entry point: ``plgf <verb> ...``.

Every verb prints a JSON document on stdout.  Failures exit nonzero and print
``{"error": <code>, "message": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .errors import ConfigurationError, PLGFError
from .flow import GridRelation
from .model import ModelConfig, count_parameters
from .training import ABLATION_SWITCHES, ExperimentConfig, RunRecord, evaluate, run_ablation, run_loss_swap, train


def load_experiment(path: str | None, overrides=()) -> ExperimentConfig:
    """Read a JSON/YAML experiment file and apply ``key.sub=value`` overrides."""
    data: dict = {}
    if path:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}  # YAML is a superset of JSON
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigurationError(f"cannot read experiment file {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError("experiment file must contain a mapping")
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            if isinstance(node.get(p), str):  # e.g. loss: "l1" -> {"kind": "l1"}
                node[p] = {"kind": node[p]}
            node = node.setdefault(p, {})
        node[leaf] = yaml.safe_load(raw)
    try:
        return ExperimentConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2)
    sys.stdout.write("\n")


def cmd_train(args):
    cfg = load_experiment(args.config, args.set)
    rec = train(cfg)
    _emit({"run_record": str(Path(cfg.output_dir) / "run_record.json"), "best_epoch": rec.best_epoch,
           "test": rec.test.to_dict() if rec.test else None})


def cmd_eval(args):
    report = evaluate(args.checkpoint, (args.dataset, args.split), args.mape_mode)
    _emit(report.to_dict())


def cmd_ablate(args):
    cfg = load_experiment(args.config, args.set)
    switches = [s for s in (args.switches or "").split(",") if s]
    _emit(run_ablation(cfg, switches))


def cmd_loss_swap(args):
    cfg = load_experiment(args.config, args.set)
    if args.model:
        cfg = cfg.replace(architecture=args.model)
    seeds = [int(s) for s in args.seeds.split(",")]
    report = run_loss_swap(cfg, yaml.safe_load(args.loss_a), yaml.safe_load(args.loss_b), seeds)
    _emit(report)


def cmd_param_count(args):
    if args.config or args.set:
        cfg = load_experiment(args.config, args.set)
        model_cfg, arch = cfg.model, cfg.architecture
    else:
        model_cfg, arch = ModelConfig(), "plgf"
    _emit({"architecture": arch, "parameters": count_parameters(model_cfg, arch), "model": model_cfg.to_dict()})


def cmd_synth(args):
    from .data import SkewParams, generate_synthetic

    rel = GridRelation(args.upscale, tuple(args.coarse))
    out = generate_synthetic(args.out, args.seed, args.count, rel, SkewParams(), presplit=not args.unsplit)
    _emit({"dataset": str(out), "count": args.count, "coarse_shape": list(rel.coarse_shape),
           "fine_shape": list(rel.fine_shape)})


def cmd_plot(args):
    from .plots import emit_plots

    records = [RunRecord.load(p) for p in args.records]
    swaps = [json.loads(Path(p).read_text()) for p in args.swap]
    labels = [Path(p).parent.name or f"run{i}" for i, p in enumerate(args.records)]
    written = emit_plots(records, args.out, labels=labels, swap_reports=swaps)
    _emit({k: [str(p) for p in v] for k, v in written.items()})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plgf", description="Fine-grained urban flow inference")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def with_config(p, required=True):
        p.add_argument("config", nargs=None if required else "?", help="JSON/YAML experiment file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. --set model.base_channels=32")
        return p

    p = with_config(sub.add_parser("train", help="train a model"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--mape-mode", default="masked", choices=["masked", "guarded"])
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("ablate", help="train ablation variants"))
    p.add_argument("--switches", default=",".join(ABLATION_SWITCHES),
                   help=f"comma-separated subset of {','.join(ABLATION_SWITCHES)}")
    p.set_defaults(func=cmd_ablate)

    p = with_config(sub.add_parser("loss-swap", help="paired loss comparison over seeds"))
    p.add_argument("--model", choices=["plgf", "simple_srnet"])
    p.add_argument("--loss-a", default="l1")
    p.add_argument("--loss-b", default="dualfocal")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.set_defaults(func=cmd_loss_swap)

    p = with_config(sub.add_parser("param-count", help="count trainable parameters"), required=False)
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("synth-data", help="write a synthetic long-tail dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=400)
    p.add_argument("--coarse", type=int, nargs=2, default=[8, 8], metavar=("H", "W"))
    p.add_argument("--upscale", type=int, default=4)
    p.add_argument("--unsplit", action="store_true", help="write one 'all' split, divided at load time")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("plot", help="plots and CSVs from run records")
    p.add_argument("--records", nargs="*", default=[])
    p.add_argument("--swap", nargs="*", default=[])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except PLGFError as exc:
        err = {"error": exc.code, "message": str(exc)}
        if getattr(exc, "indices", None):
            err["indices"] = exc.indices
        if getattr(exc, "diagnostic", None):
            err["diagnostic"] = exc.diagnostic
        json.dump(err, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except Exception as exc:  # noqa: BLE001
        json.dump({"error": "internal_error", "type": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
