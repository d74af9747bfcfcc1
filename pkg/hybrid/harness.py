# hybrid/harness.py
# v0.1.0 — experiment configuration (JSON -> dataclasses, --set overrides), single runs,
# scaling / group sweeps, time-to-loss tables, manifests and report emission.

from __future__ import annotations
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union, get_args, get_origin, get_type_hints
import csv
import hashlib
import json
import logging

import numpy as np
from tqdm import tqdm

from .cluster import (
    ClusterPlan, ComputeModel, NetworkModel, RunLog, default_compute, host_threads,
    inject_degradation, plan_cluster, read_runlog_csv, run_training, write_runlog_csv,
)
from .datagen import ClimateDataset, Dataset, HepDataset, gen_climate, gen_hep, load_dataset
from .errors import ConfigError, ValidationError
from .models import (
    ClimateLossWeights, HepNet, Network, Params, baseline_cut_classifier,
    build_climate_mini, build_hep_mini, roc_tpr_at_fpr, vortex_recall,
)
from .perf import ScalingRow, mode_name, peak_sustained, scaling_report, write_scaling_csv, write_scaling_svg
from .solvers import HEP_LR_RANGE, SGD_MOMENTUM, SolverConfig

log = logging.getLogger("harness")
audit_log = logging.getLogger("audit")

MODELS = ("hep_mini", "climate_mini")
STRONG, WEAK = "strong", "weak"
SMOOTHING = 5
HEP_TARGET_FPR = 0.002

# --------------------------- Config Models -----------------------------------

@dataclass
class ModelConfig:
    name: str = "hep_mini"
    filters: int = 16
    input_shape: Optional[List[int]] = None
    grid: int = 8
    classes: int = 2
    encoder_convs: int = 3
    decoder_deconvs: int = 3
    loss_weights: ClimateLossWeights = field(default_factory=ClimateLossWeights)
    seed: int = 0


@dataclass
class DataConfig:
    seed: int = 1
    n: int = 2000
    signal_fraction: float = 0.09
    path: Optional[str] = None


@dataclass
class ClusterConfig:
    total_nodes: int = 8
    groups: List[int] = field(default_factory=lambda: [1])
    batch_mode: str = STRONG
    total_batch: int = 64
    batch_per_node: int = 8
    execute_math: bool = True
    overlap: bool = False
    degradation: List[List[float]] = field(default_factory=list)   # [node_id, slowdown] pairs


@dataclass
class SweepConfig:
    nodes: List[int] = field(default_factory=lambda: [2 ** k for k in range(11)])
    groups: List[int] = field(default_factory=lambda: [1, 2, 4])
    momentum_grid: List[float] = field(default_factory=lambda: [0.0, 0.4, 0.7])
    sync_momentum: float = 0.9
    lr_grid: List[float] = field(default_factory=lambda: [HEP_LR_RANGE[0], 3e-4, HEP_LR_RANGE[1]])
    target_loss: float = 0.05
    timing_only: bool = True
    repeats: int = 1


@dataclass
class LoggingConfig:
    level: str = "INFO"


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    network: NetworkModel = field(default_factory=NetworkModel)
    compute: Optional[ComputeModel] = None
    sweep: SweepConfig = field(default_factory=SweepConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)
    iterations: int = 100
    seed: int = 0

    def validate(self) -> "ExperimentConfig":
        if self.model.name not in MODELS:
            raise ConfigError("model.name", f"must be one of {MODELS}, got {self.model.name!r}")
        if self.cluster.batch_mode not in (STRONG, WEAK):
            raise ConfigError("cluster.batch_mode", f"must be {STRONG!r} or {WEAK!r}")
        if not self.cluster.groups or any(g < 1 for g in self.cluster.groups):
            raise ConfigError("cluster.groups", "needs at least one group count >= 1")
        if self.cluster.batch_mode == STRONG:
            bad = [g for g in self.cluster.groups + self.sweep.groups if self.cluster.total_batch % g]
            if self.cluster.total_batch < 1 or bad:
                raise ConfigError("cluster.total_batch", f"must be >= 1 and divisible by every group count ({bad})")
        elif self.cluster.batch_per_node < 1:
            raise ConfigError("cluster.batch_per_node", "must be >= 1")
        if self.iterations < 1:
            raise ConfigError("iterations", "must be >= 1")
        for i, pair in enumerate(self.cluster.degradation):
            if len(pair) != 2:
                raise ConfigError(f"cluster.degradation[{i}]", "expected [node_id, slowdown]")
        for m in self.sweep.momentum_grid + [self.sweep.sync_momentum]:
            if not 0.0 <= m < 1.0:
                raise ConfigError("sweep.momentum_grid", f"momentum {m} outside [0, 1)")
        if not self.sweep.nodes or any(n < 1 for n in self.sweep.nodes):
            raise ConfigError("sweep.nodes", "needs positive node counts")
        if self.sweep.repeats < 1:
            raise ConfigError("sweep.repeats", "must be >= 1")
        if self.logging.level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ConfigError("logging.level", f"unknown level {self.logging.level!r}")
        try:
            self.solver.validate()
            self.network.validate()
            if self.compute is not None:
                self.compute.validate()
        except ValidationError as e:
            raise ConfigError("solver/network/compute", str(e)) from e
        return self

    def compute_model(self) -> ComputeModel:
        return self.compute if self.compute is not None else default_compute(self.model.name)

# --------------------------- Parsing -----------------------------------------

def _coerce(value: Any, hint: Any, path: str) -> Any:
    origin, args = get_origin(hint), get_args(hint)
    if origin is Union:
        if value is None and type(None) in args:
            return None
        return _coerce(value, next(a for a in args if a is not type(None)), path)
    if is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object")
        return _from_dict(hint, value, path)
    if origin is list:
        items = value if isinstance(value, list) else [value]
        return [_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(items)]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object")
        out = {}
        for k, v in value.items():
            try:
                key = args[0](k)
            except (TypeError, ValueError):
                raise ConfigError(f"{path}.{k}", f"key is not a valid {args[0].__name__}") from None
            out[key] = _coerce(v, args[1], f"{path}.{k}")
        return out
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def _from_dict(cls: type, data: Mapping[str, Any], path: str = "") -> Any:
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls) if f.init}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
    kwargs = {k: _coerce(v, hints[k], f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ValidationError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(path or cls.__name__, str(e)) from e


def config_to_dict(cfg: ExperimentConfig) -> Dict[str, Any]:
    return json.loads(json.dumps(asdict(cfg)))


def _with_compute_defaults(data: Dict[str, Any]) -> Dict[str, Any]:
    """A partial `compute` section fills its gaps from the model's default profile, not the HEP one."""
    compute = data.get("compute")
    if not isinstance(compute, dict):
        return data
    model = data.get("model")
    name = model.get("name", ModelConfig.name) if isinstance(model, dict) else ModelConfig.name
    base = json.loads(json.dumps(asdict(default_compute(str(name)))))
    return {**data, "compute": {**base, **compute}}


def parse_config(data: Mapping[str, Any]) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    return _from_dict(ExperimentConfig, _with_compute_defaults(data)).validate()


def apply_override(data: Dict[str, Any], assignment: str) -> None:
    """`a.b.c=value`; value parsed as JSON when possible, else kept as a string."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key.strip():
        raise ConfigError(assignment, "override must look like key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    node = data
    for i, part in enumerate(parts[:-1]):
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(".".join(parts[:i + 1]), "is not an object")
        node = child
    node[parts[-1]] = value


def load_config(path: Optional[Union[str, Path]], overrides: Sequence[str] = ()) -> Tuple[ExperimentConfig, str]:
    text = "{}"
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(str(p), f"cannot read config: {e.strerror or e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(str(path), f"malformed JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError(str(path), "config must be a JSON object")
    for assignment in overrides:
        apply_override(data, assignment)
    return parse_config(data), text

# --------------------------- Building blocks ---------------------------------

def build_model(cfg: ModelConfig) -> Network:
    if cfg.name == "hep_mini":
        shape = tuple(cfg.input_shape or (3, 32, 32))
        return build_hep_mini(shape, filters=cfg.filters, seed=cfg.seed)
    shape = tuple(cfg.input_shape or (8, 64, 64))
    return build_climate_mini(shape, grid=cfg.grid, classes=cfg.classes, filters=cfg.filters,
                              encoder_convs=cfg.encoder_convs, decoder_deconvs=cfg.decoder_deconvs,
                              seed=cfg.seed, loss_weights=cfg.loss_weights)


def make_dataset(cfg: ExperimentConfig, threads: int = 1) -> Dataset:
    if cfg.data.path:
        if not Path(cfg.data.path).is_file():
            raise ConfigError("data.path", f"dataset file {cfg.data.path} does not exist")
        ds = load_dataset(cfg.data.path)
    elif cfg.model.name == "hep_mini":
        c, h, _ = cfg.model.input_shape or (3, 32, 32)
        ds = gen_hep(cfg.data.seed, cfg.data.n, cfg.data.signal_fraction, size=h, threads=threads)
    else:
        c, h, _ = cfg.model.input_shape or (8, 64, 64)
        ds = gen_climate(cfg.data.seed, cfg.data.n, channels=c, size=h, grid=cfg.model.grid, threads=threads)
    expected = HepDataset if cfg.model.name == "hep_mini" else ClimateDataset
    if not isinstance(ds, expected):
        raise ValidationError(f"dataset {cfg.data.path} does not match model {cfg.model.name}")
    return ds


def solver_for(cfg: ExperimentConfig, momentum: Optional[float] = None,
               lr: Optional[float] = None) -> SolverConfig:
    """The momentum knob is mu for SGD and beta1 for Adam."""
    s = replace(cfg.solver)
    if lr is not None:
        s = replace(s, lr=lr)
    if momentum is not None:
        s = replace(s, momentum=momentum) if s.kind == SGD_MOMENTUM else replace(s, beta1=momentum)
    return s.validate()


def group_batch(cfg: ClusterConfig, workers_per_group: int) -> int:
    """Strong: every group processes the full batch; weak: batch_per_node on each worker."""
    if cfg.batch_mode == STRONG:
        return cfg.total_batch
    return cfg.batch_per_node * workers_per_group


def make_plan(cfg: ExperimentConfig, model: Network, total_nodes: int, groups: int) -> ClusterPlan:
    plan = plan_cluster(total_nodes, groups, model, replace(cfg.network), cfg.compute_model())
    for node, slowdown in cfg.cluster.degradation:
        plan = inject_degradation(plan, int(node), float(slowdown))
    return plan

# --------------------------- Manifests & files -------------------------------

def git_blob_sha1(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out_dir: Path, cfg: ExperimentConfig, config_text: str, command: str,
                   threads: int, extra: Optional[Dict[str, Any]] = None, name: str = "manifest.json") -> Path:
    inputs = {"config": git_blob_sha1(config_text.encode("utf-8"))}
    if cfg.data.path and Path(cfg.data.path).exists():
        inputs["dataset"] = git_blob_sha1(Path(cfg.data.path).read_bytes())
    manifest = {"command": command, "seed": cfg.seed, "threads": threads,
                "config": config_to_dict(cfg), "inputs": inputs}
    manifest.update(extra or {})
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    audit_log.info("manifest %s config=%s", path, inputs["config"])
    return path


def save_params(path: Path, model: Network, params: Params) -> Path:
    arrays = {f"{name}/{i}": a for name, shard in zip(model.shard_names, params) for i, a in enumerate(shard)}
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def write_run(out_dir: Path, runlog: RunLog, info: Dict[str, Any]) -> None:
    write_runlog_csv(runlog, out_dir / "runlog.csv")
    payload = {"meta": runlog.meta(), "summary": runlog.summary(), **info}
    (out_dir / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


def read_run(run_dir: Path) -> Tuple[RunLog, Dict[str, Any]]:
    try:
        payload = json.loads((run_dir / "run.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot read {run_dir / 'run.json'}: {e}") from e
    return read_runlog_csv(run_dir / "runlog.csv", **payload["meta"]), payload

# --------------------------- Single runs -------------------------------------

@dataclass
class Cell:
    sweep: str
    nodes: int
    groups: int
    seed: int
    momentum: Optional[float] = None
    lr: Optional[float] = None
    repeat: int = 0

    @property
    def key(self) -> str:
        parts = [self.sweep, mode_name(self.groups), f"n{self.nodes}"]
        if self.momentum is not None:
            parts.append(f"m{self.momentum:g}")
        if self.lr is not None:
            parts.append(f"lr{self.lr:g}")
        parts.append(f"r{self.repeat}")
        return "_".join(parts)


def run_cell(cfg: ExperimentConfig, cell: Cell, dataset: Optional[Dataset], out_dir: Optional[Path],
             execute_math: bool, threads: int = 1, extra_nodes: int = 0) -> RunLog:
    model = build_model(cfg.model)
    plan = make_plan(cfg, model, cell.nodes + extra_nodes, cell.groups)
    batch = group_batch(cfg.cluster, plan.workers_per_group)
    solver = solver_for(cfg, cell.momentum, cell.lr)
    runlog = run_training(plan, model, dataset, solver, batch, cfg.iterations, cell.seed,
                          execute_math=execute_math, overlap=cfg.cluster.overlap, threads=threads)
    if out_dir is not None:
        write_run(out_dir / cell.key, runlog, {"cell": asdict(cell), "solver": asdict(solver)})
    log.debug("cell %s: %s", cell.key, runlog.summary())
    return runlog


def evaluate(model: Network, params: Params, dataset: Dataset, split: str = "val") -> Dict[str, Any]:
    idx = dataset.indices(split)
    if idx.size == 0:
        return {}
    if isinstance(model, HepNet):
        x, y = dataset.take(idx)
        if y.all() or not y.any():
            return {}
        tpr = roc_tpr_at_fpr(model.predict_scores(params, x), y, HEP_TARGET_FPR)
        base = baseline_cut_classifier(dataset, HEP_TARGET_FPR, fit_split="train")
        return {"tpr_at_fpr": tpr, "baseline_tpr_at_fpr": roc_tpr_at_fpr(base[idx], y, HEP_TARGET_FPR)}
    x, boxes = dataset.take(idx)
    try:
        return {"vortex_recall": vortex_recall(model, params, x, boxes, 0.8)}
    except ValidationError:
        return {}

# --------------------------- Time to loss ------------------------------------

@dataclass(frozen=True)
class TimeToLoss:
    config: str
    seconds: Optional[float]

    @property
    def display(self) -> str:
        return "never" if self.seconds is None else repr(self.seconds)


def time_to_loss(runlogs: Mapping[str, RunLog], target_loss: float) -> List[TimeToLoss]:
    """First simulated end time where the trailing 5-update mean loss (global-step order) <= target."""
    out = []
    for name, rl in runlogs.items():
        recs = sorted(rl.records, key=lambda r: r.global_step)
        losses = np.array([r.loss for r in recs], dtype=np.float64)
        hit = None
        for i in range(losses.size):
            window = losses[max(0, i - SMOOTHING + 1):i + 1]
            if np.isfinite(window).all() and window.mean() <= target_loss:
                hit = recs[i].sim_time_end_s
                break
        out.append(TimeToLoss(name, hit))
    return out


def write_time_to_loss(rows: Sequence[TimeToLoss], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["config", "seconds_to_target"])
        for row in rows:
            writer.writerow([row.config, row.display])
    return path

# --------------------------- Sweeps ------------------------------------------

def _run_cells(cfg: ExperimentConfig, cells: List[Cell], dataset: Optional[Dataset], out_dir: Path,
               execute_math: bool, extra_nodes: Callable[[Network], int], desc: str) -> Dict[str, RunLog]:
    threads = host_threads()
    ps = extra_nodes(build_model(cfg.model))
    results: Dict[str, RunLog] = {}
    with ThreadPoolExecutor(max_workers=threads, thread_name_prefix="cell") as pool:
        futures = [pool.submit(run_cell, cfg, c, dataset, out_dir, execute_math, 1, ps) for c in cells]
        for cell, fut in tqdm(list(zip(cells, futures)), desc=desc, unit="run", disable=None):
            results[cell.key] = fut.result()
    log.info("%s: %d runs written under %s", desc, len(cells), out_dir)
    return results


def _scaling_cells(cfg: ExperimentConfig, sweep: str) -> List[Cell]:
    cells = []
    for nodes in cfg.sweep.nodes:
        for groups in cfg.sweep.groups:
            if nodes >= groups:
                for r in range(cfg.sweep.repeats):
                    cells.append(Cell(sweep, nodes, groups, cfg.seed + r, repeat=r))
    return cells


def sweep_scaling(cfg: ExperimentConfig, mode: str, out_dir: Path, window: int,
                  dataset: Optional[Dataset] = None) -> List[ScalingRow]:
    """Strong or weak scaling grid; node counts are workers, parameter servers come on top."""
    cfg = replace(cfg, cluster=replace(cfg.cluster, batch_mode=mode))
    cfg.validate()
    execute_math = not cfg.sweep.timing_only
    if execute_math and dataset is None:
        dataset = make_dataset(cfg)
    cells = _scaling_cells(cfg, f"{mode}")
    runs = _run_cells(cfg, cells, dataset, out_dir, execute_math,
                      lambda m: m.trainable_layer_count, f"sweep-{mode}")
    keyed = {(mode_name(c.groups), c.nodes): runs[c.key] for c in cells if c.repeat == 0}
    rows = scaling_report(keyed, window)
    write_scaling_csv(rows, out_dir / f"scaling_{mode}.csv")
    write_scaling_svg(rows, out_dir / f"scaling_{mode}.svg", title=f"{mode} scaling ({cfg.model.name})")
    return rows


def sweep_groups(cfg: ExperimentConfig, out_dir: Path, dataset: Optional[Dataset] = None) -> List[TimeToLoss]:
    """Momentum x learning-rate grid per group count; sync runs use the fixed sync momentum."""
    dataset = dataset if dataset is not None else make_dataset(cfg, host_threads())
    cells = []
    for groups in cfg.sweep.groups:
        grid = [cfg.sweep.sync_momentum] if groups == 1 else cfg.sweep.momentum_grid
        for momentum in grid:
            for lr in cfg.sweep.lr_grid:
                for r in range(cfg.sweep.repeats):
                    cells.append(Cell("groups", cfg.cluster.total_nodes, groups, cfg.seed + r, momentum, lr, r))
    runs = _run_cells(cfg, cells, dataset, out_dir, True, lambda m: 0, "sweep-groups")
    rows = time_to_loss(runs, cfg.sweep.target_loss)
    write_time_to_loss(rows, out_dir / "time_to_loss.csv")
    return rows

# --------------------------- Report ------------------------------------------

def collect_runs(root: Path) -> List[Tuple[RunLog, Dict[str, Any]]]:
    runs = []
    for run_json in sorted(root.glob("*/run.json")):
        runs.append(read_run(run_json.parent))
    if not runs:
        raise ValidationError(f"no runs found under {root}")
    return runs


def report(root: Path, window: int, target_loss: Optional[float] = None) -> Dict[str, Any]:
    """Re-analyze every run under `root`: scaling tables per sweep, peak/sustained, time to loss."""
    runs = collect_runs(root)
    out: Dict[str, Any] = {"runs": len(runs)}
    by_sweep: Dict[str, Dict[Tuple[str, int], RunLog]] = {}
    named: Dict[str, RunLog] = {}
    for rl, payload in runs:
        cell = payload.get("cell", {})
        sweep = cell.get("sweep", "train")
        if cell.get("repeat", 0) == 0 and sweep in (STRONG, WEAK):
            by_sweep.setdefault(sweep, {})[(rl.mode, cell["nodes"])] = rl
        key = Cell(**cell).key if cell else rl.mode
        named[key] = rl
        if len(rl.records) >= window and any(r.flops for r in rl.records):
            try:
                peak, sustained = peak_sustained(rl, window)
                out[f"{key}.peak_flops_per_s"] = peak
                out[f"{key}.sustained_flops_per_s"] = sustained
            except ValidationError as e:
                log.warning("skipping peak/sustained for %s: %s", key, e)
    for sweep, keyed in sorted(by_sweep.items()):
        rows = scaling_report(keyed, window)
        write_scaling_csv(rows, root / f"scaling_{sweep}.csv")
        write_scaling_svg(rows, root / f"scaling_{sweep}.svg", title=f"{sweep} scaling")
        out[f"{sweep}.rows"] = len(rows)
    if target_loss is not None:
        rows = time_to_loss(named, target_loss)
        write_time_to_loss(rows, root / "time_to_loss.csv")
        out["time_to_loss.reached"] = sum(1 for r in rows if r.seconds is not None)
    return out
