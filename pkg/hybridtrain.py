# hybridtrain.py
# HybridTrain CLI — synthetic data, simulated sync / hybrid training, scaling sweeps, reports
# v0.1.0 — METRICS block on stdout, logs on stderr

from __future__ import annotations
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional
import argparse, json, logging, os, sys

from hybrid import __version__
from hybrid.cluster import host_threads
from hybrid.datagen import HepDataset, save_dataset
from hybrid.errors import DivergenceError, HybridTrainError
from hybrid.perf import peak_sustained
from hybrid.harness import (
    STRONG, WEAK, Cell, ExperimentConfig, build_model, evaluate, load_config, make_dataset,
    report, run_cell, save_params, sweep_groups, sweep_scaling, write_manifest,
)

LOG_ENV = "HYBRIDTRAIN_LOG_LEVEL"
log = logging.getLogger("harness")

# ------------------------- Output --------------------------------------------

def _print_metrics(metrics: Dict[str, Any]) -> None:
    print("METRICS:")
    for k in sorted(metrics.keys()):
        print(f"- {k}: {metrics[k]}")

def _print_metrics_json(metrics: Dict[str, Any]) -> None:
    print(json.dumps({"metrics": metrics}, ensure_ascii=False, indent=2))

def _setup_logging(cfg: ExperimentConfig) -> None:
    level = os.getenv(LOG_ENV) or cfg.logging.level
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)

# ------------------------- Commands ------------------------------------------

def _cmd_gen_data(cfg: ExperimentConfig, args: argparse.Namespace, out: Path) -> Dict[str, Any]:
    threads = host_threads()
    path = Path(cfg.data.path) if cfg.data.path else out / "dataset.dlsd"
    gen_cfg = replace(cfg, data=replace(cfg.data, path=None))
    ds = make_dataset(gen_cfg, threads)
    save_dataset(ds, path)
    metrics: Dict[str, Any] = {"samples": len(ds), "path": str(path), "seed": ds.seed}
    for split in ("train", "val", "test"):
        metrics[f"{split}_samples"] = int(ds.indices(split).size)
    if isinstance(ds, HepDataset):
        metrics["signal_fraction"] = round(float(ds.labels.mean()), 6)
    else:
        metrics["boxes"] = sum(len(b) for b in ds.boxes)
    return metrics


def _cmd_train(cfg: ExperimentConfig, args: argparse.Namespace, out: Path) -> Dict[str, Any]:
    threads = host_threads()
    dataset = make_dataset(cfg, threads) if cfg.cluster.execute_math else None
    metrics: Dict[str, Any] = {}
    diverged = []
    for groups in cfg.cluster.groups:
        cell = Cell("train", cfg.cluster.total_nodes, groups, cfg.seed)
        rl = run_cell(cfg, cell, dataset, out, cfg.cluster.execute_math, threads=threads)
        prefix = rl.mode
        for k, v in rl.summary().items():
            if k != "mode":
                metrics[f"{prefix}.{k}"] = v
        if rl.diverged_at is not None:
            diverged.append(f"{prefix} at update {rl.diverged_at} ({rl.divergence_layer})")
            continue
        if args.window:
            peak, sustained = peak_sustained(rl, args.window)
            metrics[f"{prefix}.peak_flops_per_s"] = peak
            metrics[f"{prefix}.sustained_flops_per_s"] = sustained
        if rl.final_params is not None:
            model = build_model(cfg.model)
            save_params(out / cell.key / "model.npz", model, rl.final_params)
            if args.evaluate:
                for k, v in evaluate(model, rl.final_params, dataset).items():
                    metrics[f"{prefix}.{k}"] = v
    if diverged:
        raise DivergenceError("training diverged: " + "; ".join(diverged))
    return metrics


def _cmd_sweep_scaling(mode: str):
    def run(cfg: ExperimentConfig, args: argparse.Namespace, out: Path) -> Dict[str, Any]:
        rows = sweep_scaling(cfg, mode, out, args.window)
        metrics: Dict[str, Any] = {"rows": len(rows)}
        for r in rows:
            metrics[f"{r.mode}.n{r.nodes}.speedup"] = round(r.speedup, 4)
            metrics[f"{r.mode}.n{r.nodes}.efficiency"] = round(r.efficiency, 4)
        return metrics
    return run


def _cmd_sweep_groups(cfg: ExperimentConfig, args: argparse.Namespace, out: Path) -> Dict[str, Any]:
    rows = sweep_groups(cfg, out)
    metrics: Dict[str, Any] = {"runs": len(rows), "target_loss": cfg.sweep.target_loss}
    for r in rows:
        metrics[f"{r.config}.seconds_to_target"] = r.display
    return metrics


def _cmd_report(cfg: ExperimentConfig, args: argparse.Namespace, out: Path) -> Dict[str, Any]:
    target = args.target_loss if args.target_loss is not None else cfg.sweep.target_loss
    return report(out, args.window, target)


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "sweep-strong": _cmd_sweep_scaling(STRONG),
    "sweep-weak": _cmd_sweep_scaling(WEAK),
    "sweep-groups": _cmd_sweep_groups,
    "report": _cmd_report,
}

# ------------------------- CLI -----------------------------------------------

def _build_arg_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        description=f"HybridTrain v{__version__} — simulated synchronous / hybrid asynchronous training.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("command", choices=sorted(COMMANDS), help="What to run.")

    opt = p.add_argument_group("Options")
    opt.add_argument("-c", "--config", type=str, default=None, help="JSON experiment config.")
    opt.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                     help="Override a config value by dotted path (value parsed as JSON). Repeatable.")
    opt.add_argument("-o", "--out", type=str, default="runs", help="Output directory.")
    opt.add_argument("--repeats", type=int, default=None, help="Seeds per sweep cell (overrides sweep.repeats).")
    opt.add_argument("--window", type=int, default=None,
                     help="Updates per sustained-rate window; required by sweep-strong, sweep-weak and report.")
    opt.add_argument("--target-loss", type=float, default=None, help="report: time-to-loss target.")
    opt.add_argument("--evaluate", action="store_true", help="train: score the final model on the val split.")
    opt.add_argument("--no-metrics", action="store_true", help="Suppress the METRICS block.")
    opt.add_argument("--metrics-json", action="store_true", help="Emit metrics as JSON.")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = _build_arg_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if not e.code else 1
    if args.command in ("sweep-strong", "sweep-weak", "report") and not args.window:
        print(f"Error: {args.command} requires --window", file=sys.stderr)
        return 1
    if args.window is not None and args.window < 1:
        print("Error: --window must be >= 1", file=sys.stderr)
        return 1

    overrides = list(args.overrides)
    if args.repeats is not None:
        overrides.append(f"sweep.repeats={args.repeats}")
    out = Path(args.out)
    try:
        cfg, text = load_config(args.config, overrides)
        _setup_logging(cfg)
        manifest = "report_manifest.json" if args.command == "report" else "manifest.json"
        write_manifest(out, cfg, text, args.command, host_threads(),
                       {"argv": list(argv if argv is not None else sys.argv[1:])}, name=manifest)
        metrics = COMMANDS[args.command](cfg, args, out)
    except DivergenceError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 2
    except (HybridTrainError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1

    if not args.no_metrics:
        _print_metrics(metrics)
    if args.metrics_json:
        _print_metrics_json(metrics)
    return 0

if __name__ == "__main__":
    raise SystemExit(main())
