"""Pipeline CLI: train-revit, extract-labels, train-tla, eval, bench, export-curve.

Each stage reads and writes only declared artifacts under the run's
output directory, so stages can be re-run independently:

    train-revit    -> revit.ckpt, train_log.csv
    extract-labels -> labels.csv           (needs revit.ckpt)
    train-tla      -> tla.ckpt, tla_report.json
    eval           -> report.json
    bench          -> bench.json
    export-curve   -> tradeoff.csv         (merges bench.json when present)

Exit codes: 0 success, 1 validation/usage error, 2 IO error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import adaptive as adaptive_mod
from .adaptive import TradeoffReport, TradeoffRow, all_policy_names, export_tradeoff
from .assigner import TokenLengthAssigner, train_tla
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config
from .data import FormatError, load_dataset
from .labeling import LabelSet, extract_labels
from .model import ReViT
from .training import train

STAGES = ("train-revit", "extract-labels", "train-tla", "eval", "bench", "export-curve")


class _UsageExit(Exception):
    def __init__(self, message: str):
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    # spec: unknown flags print usage and exit 1, not argparse's default 2
    def error(self, message):
        raise _UsageExit(f"{self.format_usage()}{self.prog}: error: {message}")


def _parse_bool(value: str) -> bool:
    low = value.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got '{value}'")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="revit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="stage", required=True, parser_class=_Parser)
    for stage in STAGES:
        p = sub.add_parser(stage)
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--data-dir", default=None, help="override the dataset directory")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--parallel", type=_parse_bool, default=None,
                       help="override replica-parallel training (true/false)")
        p.add_argument("--policy", default=None,
                       help="restrict eval/bench to one policy, e.g. fixed(0) or adaptive")
    return parser


def _effective_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.data_dir is not None:
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, dir=args.data_dir))
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    plan = dataclasses.replace(cfg.plan, seed=cfg.seed,
                               **({"parallel": args.parallel} if args.parallel is not None else {}))
    tla = dataclasses.replace(cfg.tla, seed=cfg.seed)
    return dataclasses.replace(cfg, plan=plan, tla=tla)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(cfg: RunConfig, out: Path) -> ReViT:
    model = ReViT(cfg.model, seed=cfg.seed)
    model.store.load(load_checkpoint(out / "revit.ckpt"))
    return model


def _load_tla(cfg: RunConfig, out: Path) -> TokenLengthAssigner:
    tla = TokenLengthAssigner(cfg.model.image_size, cfg.model.channels,
                              cfg.model.schedule.k, cfg.tla.conv_channels, seed=cfg.seed)
    tla.load(load_checkpoint(out / "tla.ckpt"))
    return tla


def _report_to_json(report: TradeoffReport, path: Path) -> None:
    rows = [dataclasses.asdict(r) | {"hist": list(r.hist)} for r in report.rows]
    path.write_text(json.dumps({"rows": rows}, indent=1) + "\n")


def _report_from_json(path: Path) -> TradeoffReport:
    raw = json.loads(path.read_text())
    return TradeoffReport([
        TradeoffRow(r["policy"], r["top1"], r["mean_tokens"], r["mean_flops"],
                    r["ips"], tuple(r["hist"]))
        for r in raw["rows"]
    ])


def _stage_train_revit(cfg: RunConfig, args) -> None:
    out = _out_dir(cfg)
    dataset = load_dataset(cfg.data, "train")
    model = ReViT(cfg.model, seed=cfg.seed)
    log = train(model, dataset, cfg.plan, verbose=True)
    save_checkpoint(model.store.params, out / "revit.ckpt")
    log.to_csv(out / "train_log.csv")
    print(f"wrote {out / 'revit.ckpt'} and {out / 'train_log.csv'}")


def _stage_extract_labels(cfg: RunConfig, args) -> None:
    out = _out_dir(cfg)
    dataset = load_dataset(cfg.data, "train")
    model = _load_model(cfg, out)
    labels = extract_labels(model, dataset)
    labels.to_csv(out / "labels.csv")
    print(f"wrote {out / 'labels.csv'} (histogram {labels.histogram().tolist()})")


def _stage_train_tla(cfg: RunConfig, args) -> None:
    out = _out_dir(cfg)
    dataset = load_dataset(cfg.data, "train")
    labels = LabelSet.from_csv(out / "labels.csv")
    tla = TokenLengthAssigner(cfg.model.image_size, cfg.model.channels,
                              cfg.model.schedule.k, cfg.tla.conv_channels, seed=cfg.seed)
    report = train_tla(tla, labels, dataset, cfg.tla)
    save_checkpoint(tla.params, out / "tla.ckpt")
    (out / "tla_report.json").write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    print(f"wrote {out / 'tla.ckpt'}; assigner train accuracy {report.train_accuracy:.3f}")


def _policies(cfg: RunConfig, args) -> list[str] | None:
    return [args.policy] if args.policy else None


def _stage_eval(cfg: RunConfig, args) -> None:
    out = _out_dir(cfg)
    dataset = load_dataset(cfg.data, "test")
    model = _load_model(cfg, out)
    policies = _policies(cfg, args) or all_policy_names(model.k)
    tla = _load_tla(cfg, out) if "adaptive" in policies else None
    report = adaptive_mod.evaluate_all(model, dataset, tla=tla, policies=policies)
    _report_to_json(report, out / "report.json")
    for r in report.rows:
        print(f"{r.policy}: top1={r.top1:.4f} mean_tokens={r.mean_tokens:.1f} mean_flops={r.mean_flops:.3e}")
    print(f"wrote {out / 'report.json'}")


def _stage_bench(cfg: RunConfig, args) -> None:
    out = _out_dir(cfg)
    dataset = load_dataset(cfg.data, "test")
    model = _load_model(cfg, out)
    policies = _policies(cfg, args)
    need_tla = policies is None or "adaptive" in policies
    tla = _load_tla(cfg, out) if need_tla else None
    results = adaptive_mod.benchmark_throughput(model, tla, dataset, policies=policies)
    (out / "bench.json").write_text(json.dumps(results, indent=1) + "\n")
    for name, r in results.items():
        print(f"{name}: {r['ips']:.1f} images/sec (spread {r['spread']:.2f})")
    print(f"wrote {out / 'bench.json'}")


def _stage_export_curve(cfg: RunConfig, args) -> None:
    out = _out_dir(cfg)
    report = _report_from_json(out / "report.json")
    bench_path = out / "bench.json"
    if bench_path.is_file():
        bench = json.loads(bench_path.read_text())
        for row in report.rows:
            if row.policy in bench:
                row.ips = bench[row.policy]["ips"]
    export_tradeoff(report, out / "tradeoff.csv")
    print(f"wrote {out / 'tradeoff.csv'}")


_STAGE_FN = {
    "train-revit": _stage_train_revit,
    "extract-labels": _stage_extract_labels,
    "train-tla": _stage_train_tla,
    "eval": _stage_eval,
    "bench": _stage_bench,
    "export-curve": _stage_export_curve,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _effective_config(args)
        _STAGE_FN[args.stage](cfg, args)
        return 0
    except _UsageExit as exc:
        print(exc, file=sys.stderr)
        return 1
    except (FileNotFoundError, OSError, FormatError, CheckpointError, json.JSONDecodeError) as exc:
        print(f"revit: IO error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, IndexError) as exc:
        print(f"revit: invalid input: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
