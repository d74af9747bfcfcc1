# hybrid/cluster.py
# v0.1.0 — discrete-event simulator of synchronous / asynchronous / hybrid training:
# compute groups (allreduce inside, async across) talking to one parameter server per
# trainable layer, with real gradient math and a seeded timing model.

from __future__ import annotations
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import count
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union
import csv
import heapq
import logging
import math
import os
import struct

import numpy as np

from .datagen import RUNLOG_KIND, Dataset, read_container, write_container
from .errors import DivergenceError, PlanningError, SimulationError, ValidationError
from .models import Network, Params
from .perf import mode_name, model_flops
from .seeding import stream
from .solvers import SolverConfig, init_solver_state, solver_step

log = logging.getLogger("cluster")
engine_log = logging.getLogger("engine")
audit_log = logging.getLogger("audit")

THREADS_ENV = "HYBRIDTRAIN_THREADS"
BYTES_PER_PARAM = 4
DEFAULT_EFFICIENCY = {1: 0.25, 2: 0.4, 4: 0.6, 8: 0.8, 16: 0.92, 32: 1.0}
RUNLOG_COLUMNS = ("iter", "group", "sim_time_start_s", "sim_time_end_s", "loss",
                  "global_step", "staleness", "flops")

PathLike = Union[str, Path]


def host_threads(default: int = 1) -> int:
    """Host parallelism cap from HYBRIDTRAIN_THREADS; never changes results."""
    raw = os.getenv(THREADS_ENV, "").strip()
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValidationError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n

# --------------------------- Timing models -----------------------------------

@dataclass
class NetworkModel:
    latency: float = 4e-6               # seconds per message
    bandwidth: float = 1e9              # bytes / second
    jitter: float = 0.0                 # lognormal sigma, multiplicative per message
    stream_id: int = 0

    def validate(self) -> "NetworkModel":
        if self.latency < 0 or not self.bandwidth > 0 or self.jitter < 0:
            raise ValidationError("network model needs latency >= 0, bandwidth > 0, jitter >= 0")
        return self

    def message_time(self, nbytes: float, rng: Optional[np.random.Generator] = None) -> float:
        base = self.latency + nbytes / self.bandwidth
        if self.jitter > 0 and rng is not None:
            base *= float(rng.lognormal(0.0, self.jitter))
        return base


@dataclass
class ComputeModel:
    seconds_per_sample: float = 5e-4
    efficiency: Dict[int, float] = field(default_factory=lambda: dict(DEFAULT_EFFICIENCY))
    straggler_prob: float = 5e-5
    straggler_slowdown: float = 1.5
    overhead_fraction: float = 0.125    # non-FLOP time (solver update, I/O)
    ps_seconds_per_param: float = 2e-9  # parameter-server apply cost
    checkpoint_every: int = 10
    checkpoint_seconds: float = 0.0

    def validate(self) -> "ComputeModel":
        if not self.seconds_per_sample > 0:
            raise ValidationError("compute.seconds_per_sample must be > 0")
        pairs = sorted((int(k), float(v)) for k, v in self.efficiency.items())
        keys, vals = [p[0] for p in pairs], [p[1] for p in pairs]
        if not keys or keys[0] < 1:
            raise ValidationError("compute.efficiency needs batch sizes >= 1")
        if any(not 0 < v <= 1 for v in vals) or any(b < a for a, b in zip(vals, vals[1:])):
            raise ValidationError("compute.efficiency multipliers must be in (0, 1] and non-decreasing")
        if not 0 <= self.straggler_prob <= 1 or self.straggler_slowdown < 1:
            raise ValidationError("compute straggler_prob must be in [0, 1] and slowdown >= 1")
        if not 0 <= self.overhead_fraction < 1:
            raise ValidationError("compute.overhead_fraction must be in [0, 1)")
        if self.ps_seconds_per_param < 0 or self.checkpoint_seconds < 0 or self.checkpoint_every < 1:
            raise ValidationError("compute PS/checkpoint costs must be >= 0 and checkpoint_every >= 1")
        return self

    def _curve(self) -> Tuple[np.ndarray, np.ndarray]:
        pairs = sorted((int(k), float(v)) for k, v in self.efficiency.items())
        return np.log2([p[0] for p in pairs]), np.array([p[1] for p in pairs])

    def efficiency_at(self, batch: Union[int, np.ndarray]) -> np.ndarray:
        """Relative throughput, interpolated in log2(batch) and clamped at the table ends."""
        xs, ys = self._curve()
        return np.interp(np.log2(np.maximum(batch, 1)), xs, ys)

    def node_seconds(self, batches: np.ndarray) -> np.ndarray:
        b = np.asarray(batches, dtype=np.float64)
        t = b * self.seconds_per_sample / self.efficiency_at(b) / (1.0 - self.overhead_fraction)
        return np.where(b > 0, t, 0.0)


HEP_COMPUTE = ComputeModel(seconds_per_sample=5e-4, overhead_fraction=0.125)
CLIMATE_COMPUTE = ComputeModel(seconds_per_sample=1.25e-2, overhead_fraction=0.02)


def default_compute(model_id: str) -> ComputeModel:
    return replace(CLIMATE_COMPUTE if model_id == "climate_mini" else HEP_COMPUTE,
                   efficiency=dict(DEFAULT_EFFICIENCY))


def allreduce_time(message_bytes: float, group_size: int, net: NetworkModel,
                   rng: Optional[np.random.Generator] = None) -> float:
    """Ring allreduce: 2(p-1) steps of (bytes/p)/bandwidth + latency, each step jittered."""
    if group_size < 1:
        raise ValidationError("allreduce group_size must be >= 1")
    if group_size == 1:
        return 0.0
    steps = 2 * (group_size - 1)
    per_step = net.latency + (message_bytes / group_size) / net.bandwidth
    if net.jitter > 0 and rng is not None:
        return float((per_step * rng.lognormal(0.0, net.jitter, steps)).sum())
    return steps * per_step


def broadcast_time(message_bytes: float, group_size: int, net: NetworkModel,
                   rng: Optional[np.random.Generator] = None) -> float:
    """Binary-tree broadcast from the root: ceil(log2 p) hops of a full message."""
    if group_size <= 1:
        return 0.0
    return math.ceil(math.log2(group_size)) * net.message_time(message_bytes, rng)

# --------------------------- Plan --------------------------------------------

@dataclass(frozen=True)
class ClusterPlan:
    total_nodes: int
    num_groups: int
    ps_nodes: int
    workers_per_group: int
    idle_nodes: int
    roots: Tuple[int, ...]
    layer_params: Tuple[int, ...]
    model_id: str
    network: NetworkModel = field(default_factory=NetworkModel)
    compute: ComputeModel = field(default_factory=ComputeModel)
    degradation: Mapping[int, float] = field(default_factory=dict)

    @property
    def workers(self) -> int:
        return self.num_groups * self.workers_per_group

    @property
    def synchronous(self) -> bool:
        return self.num_groups == 1

    def group_nodes(self, group: int) -> range:
        start = group * self.workers_per_group
        return range(start, start + self.workers_per_group)

    def ps_node(self, layer: int) -> int:
        return self.workers + layer


def plan_cluster(total_nodes: int, groups: int, model: Network,
                 network: Optional[NetworkModel] = None,
                 compute: Optional[ComputeModel] = None) -> ClusterPlan:
    """One PS per trainable layer, equal worker groups; leftover nodes idle. Node ids: workers, PS, idle."""
    ps = model.trainable_layer_count
    if groups < 1:
        raise PlanningError(f"groups must be >= 1, got {groups}")
    if total_nodes - ps < groups:
        raise PlanningError(
            f"{total_nodes} nodes cannot host {ps} parameter servers plus {groups} group(s) of >= 1 worker")
    wpg = (total_nodes - ps) // groups
    idle = total_nodes - ps - groups * wpg
    if idle:
        log.info("plan %d nodes / %d groups leaves %d idle node(s)", total_nodes, groups, idle)
    plan = ClusterPlan(total_nodes, groups, ps, wpg, idle,
                       tuple(g * wpg for g in range(groups)), tuple(model.shard_sizes()), model.model_id,
                       (network or NetworkModel()).validate(),
                       (compute or default_compute(model.model_id)).validate())
    log.debug("plan: %d workers in %d groups of %d, %d PS", plan.workers, groups, wpg, ps)
    return plan


def inject_degradation(plan: ClusterPlan, node_id: int, slowdown: float) -> ClusterPlan:
    """Multiply one worker's compute time by `slowdown` for the whole run."""
    if not 0 <= node_id < plan.workers:
        raise ValidationError(f"node {node_id} is not a worker (workers are 0..{plan.workers - 1})")
    if not slowdown >= 1.0:
        raise ValidationError(f"slowdown must be >= 1, got {slowdown}")
    degraded = dict(plan.degradation)
    degraded[node_id] = degraded.get(node_id, 1.0) * float(slowdown)
    return replace(plan, degradation=degraded)

# --------------------------- RunLog ------------------------------------------

@dataclass(frozen=True)
class RunRecord:
    iter: int
    group: int
    sim_time_start_s: float
    sim_time_end_s: float
    loss: float
    global_step: int
    staleness: int
    flops: int


@dataclass(eq=False)
class RunLog:
    records: List[RunRecord] = field(default_factory=list)
    groups: int = 1
    total_nodes: int = 1
    workers_per_group: int = 1
    batch_per_group: int = 1
    model_id: str = ""
    diverged_at: Optional[int] = None
    divergence_layer: Optional[str] = None
    final_params: Optional[Params] = None

    @property
    def mode(self) -> str:
        return mode_name(self.groups)

    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    def staleness(self) -> np.ndarray:
        return np.array([r.staleness for r in self.records], dtype=np.int64)

    def summary(self) -> Dict[str, Any]:
        st = self.staleness()
        return {
            "mode": self.mode,
            "updates": len(self.records),
            "sim_seconds": self.records[-1].sim_time_end_s if self.records else 0.0,
            "final_loss": self.records[-1].loss if self.records else float("nan"),
            "mean_staleness": float(st.mean()) if st.size else 0.0,
            "max_staleness": int(st.max()) if st.size else 0,
            "diverged_at": self.diverged_at,
        }

    def meta(self) -> Dict[str, Any]:
        return {"groups": self.groups, "total_nodes": self.total_nodes,
                "workers_per_group": self.workers_per_group, "batch_per_group": self.batch_per_group,
                "model_id": self.model_id, "diverged_at": self.diverged_at,
                "divergence_layer": self.divergence_layer}


def write_runlog_csv(runlog: RunLog, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RUNLOG_COLUMNS)
        for r in runlog.records:
            writer.writerow([r.iter, r.group, repr(r.sim_time_start_s), repr(r.sim_time_end_s),
                             repr(r.loss), r.global_step, r.staleness, r.flops])
    return path


def read_runlog_csv(path: PathLike, **meta: Any) -> RunLog:
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as e:
        raise ValidationError(f"cannot read runlog {path}: {e.strerror or e}") from e
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != RUNLOG_COLUMNS:
            raise ValidationError(f"{path}: runlog header must be {','.join(RUNLOG_COLUMNS)}")
        records = []
        for row in reader:
            try:
                records.append(RunRecord(int(row[0]), int(row[1]), float(row[2]), float(row[3]),
                                         float(row[4]), int(row[5]), int(row[6]), int(row[7])))
            except (IndexError, ValueError) as e:
                raise ValidationError(f"{path}:{reader.line_num}: malformed runlog row") from e
    return RunLog(records, **meta)


_RECORD = "<IIdddIIQ"


def write_runlog_bin(runlog: RunLog, path: PathLike, seed: int = 0) -> None:
    name = runlog.model_id.encode("utf-8")
    parts = [struct.pack("<4Iq", runlog.groups, runlog.total_nodes, runlog.workers_per_group,
                         runlog.batch_per_group, -1 if runlog.diverged_at is None else runlog.diverged_at),
             struct.pack("<I", len(name)), name]
    parts += [struct.pack(_RECORD, r.iter, r.group, r.sim_time_start_s, r.sim_time_end_s, r.loss,
                          r.global_step, r.staleness, r.flops) for r in runlog.records]
    write_container(path, RUNLOG_KIND, len(runlog.records), seed, b"".join(parts))


def read_runlog_bin(path: PathLike) -> RunLog:
    n, _, r = read_container(path, RUNLOG_KIND)
    groups, total, wpg, batch, diverged = r.read("<4Iq")
    (length,) = r.read("<I")
    (name,) = r.read(f"<{length}s")
    records = [RunRecord(*r.read(_RECORD)) for _ in range(n)]
    r.finish()
    return RunLog(records, groups, total, wpg, batch, name.decode("utf-8"),
                  None if diverged < 0 else diverged)

# --------------------------- Reference trainer -------------------------------

def batch_indices(pool: np.ndarray, seed: int, group: int, local_iter: int, batch: int) -> np.ndarray:
    rng = stream(seed, "batch", group, local_iter)
    return rng.choice(pool, size=batch, replace=batch > pool.size)


@dataclass
class ReferenceResult:
    losses: List[float]
    params: Params


def train_reference(model: Network, dataset: Dataset, solver: SolverConfig, batch: int,
                    iterations: int, seed: int, split: str = "train") -> ReferenceResult:
    """Plain synchronous data-parallel training outside the simulator."""
    pool = dataset.indices(split)
    if pool.size == 0:
        raise ValidationError(f"split {split!r} is empty")
    params = model.copy_params()
    states = [init_solver_state(solver, shard) for shard in params]
    losses = []
    for it in range(iterations):
        x, y = dataset.take(batch_indices(pool, seed, 0, it, batch))
        loss, grads = model.loss_and_grads(params, x, y)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {it + 1}", step=it + 1)
        for name, shard, g, st in zip(model.shard_names, params, grads, states):
            solver_step(shard, g, st, name)
        losses.append(loss)
    return ReferenceResult(losses, params)

# --------------------------- Simulator ---------------------------------------

START, READY, ARRIVAL, RETURN, DONE = "start", "ready", "arrival", "return", "done"
_RANK = {ARRIVAL: 0, RETURN: 1, DONE: 2, READY: 3, START: 4}


@dataclass
class _Update:
    group: int
    local_iter: int
    start: float
    read: List[int]
    future: Optional[Future] = None
    loss: float = float("nan")
    grads: Optional[Params] = None
    pending: int = 0
    returns: int = 0
    finish: float = 0.0
    staleness: int = 0


@dataclass
class _Group:
    gid: int
    params: Params
    read: List[int]
    base_seconds: np.ndarray
    local_iter: int = 0


class Simulator:
    """
    Event loop over simulated time. Event keys are (time, group, kind rank, layer, seq), so
    ties resolve by group id. Gradient jobs run on a host thread pool against private
    parameter snapshots; every simulated quantity depends only on the event order.
    """

    def __init__(self, plan: ClusterPlan, model: Network, dataset: Optional[Dataset],
                 solver: SolverConfig, batch_per_group: int, iterations: int, seed: int,
                 execute_math: bool = True, overlap: bool = False, threads: Optional[int] = None,
                 split: str = "train"):
        if batch_per_group < 1 or iterations < 1:
            raise ValidationError("batch_per_group and iterations must be >= 1")
        if plan.ps_nodes != model.trainable_layer_count or tuple(model.shard_sizes()) != plan.layer_params:
            raise ValidationError(f"plan was built for {plan.model_id}, not this {model.model_id} instance")
        if execute_math and dataset is None:
            raise ValidationError("execute_math needs a dataset")
        self.plan, self.model, self.dataset = plan, model, dataset
        self.batch, self.iterations, self.seed = batch_per_group, iterations, seed
        self.execute_math = execute_math
        self.overlap = overlap and not plan.synchronous
        self.threads = threads or host_threads()
        self.pool = dataset.indices(split) if execute_math else np.zeros(0, dtype=np.int64)
        if execute_math and self.pool.size == 0:
            raise ValidationError(f"split {split!r} is empty")

        self.layers = len(plan.layer_params)
        self.layer_bytes = [BYTES_PER_PARAM * n for n in plan.layer_params]
        self.model_bytes = sum(self.layer_bytes)
        self.flops = model_flops(model, batch_per_group)
        self.params = model.copy_params()
        self.states = [init_solver_state(solver, shard) for shard in self.params]
        self.versions = [0] * self.layers
        self.busy = [0.0] * self.layers

        p = plan.workers_per_group
        batches = np.full(p, batch_per_group // p, dtype=np.int64)
        batches[: batch_per_group % p] += 1
        per_node = plan.compute.node_seconds(batches)
        self.groups = []
        for g in range(plan.num_groups):
            factors = np.array([plan.degradation.get(n, 1.0) for n in plan.group_nodes(g)])
            snapshot = [[a.copy() for a in shard] for shard in self.params] if execute_math else []
            self.groups.append(_Group(g, snapshot, [0] * self.layers, per_node * factors))

        self.heap: List[Tuple] = []
        self.seq = count()
        self.issued = 0
        self.global_step = 0
        self.records: List[RunRecord] = []
        self.diverged_at: Optional[int] = None
        self.divergence_layer: Optional[str] = None
        self.executor: Optional[ThreadPoolExecutor] = None

    # ----- event plumbing -----------------------------------------------------

    def _push(self, time: float, kind: str, group: int, layer: int = -1, payload: Any = None) -> None:
        heapq.heappush(self.heap, (time, group, _RANK[kind], layer, next(self.seq), kind, payload))

    def _compute_seconds(self, grp: _Group, local_iter: int) -> float:
        c = self.plan.compute
        t = grp.base_seconds
        if c.straggler_prob > 0:
            slow = stream(self.seed, "straggler", grp.gid, local_iter).random(t.size) < c.straggler_prob
            t = t * np.where(slow, c.straggler_slowdown, 1.0)
        total = float(t.max())
        if c.checkpoint_seconds and (local_iter + 1) % c.checkpoint_every == 0:
            total += c.checkpoint_seconds
        return total

    def _net_rng(self, *key: int) -> Optional[np.random.Generator]:
        if self.plan.network.jitter <= 0:
            return None
        return stream(self.seed, "net", self.plan.network.stream_id, *key)

    # ----- handlers -----------------------------------------------------------

    def _start(self, t: float, grp: _Group) -> None:
        if self.issued >= self.iterations:
            return
        self.issued += 1
        u = _Update(grp.gid, grp.local_iter, t, list(grp.read))
        grp.local_iter += 1
        if self.execute_math:
            x, y = self.dataset.take(batch_indices(self.pool, self.seed, grp.gid, u.local_iter, self.batch))
            u.future = self.executor.submit(self.model.loss_and_grads, list(grp.params), x, y)
        p = self.plan.workers_per_group
        duration = self._compute_seconds(grp, u.local_iter)
        duration += allreduce_time(self.model_bytes, p, self.plan.network, self._net_rng(0, grp.gid, u.local_iter))
        self._push(t + duration, READY, grp.gid, payload=u)

    def _ready(self, t: float, u: _Update) -> None:
        if u.future is not None:
            u.loss, u.grads = u.future.result()
            u.future = None
            if not math.isfinite(u.loss):
                self._diverge(t, u, None, f"non-finite loss {u.loss}")
                return
        u.pending = u.returns = self.layers
        for l in range(self.layers):
            send = self.plan.network.message_time(self.layer_bytes[l], self._net_rng(1, u.group, u.local_iter, l))
            self._push(t + send, ARRIVAL, u.group, l, u)
        if self.overlap:
            self._push(t, START, u.group)

    def _arrival(self, t: float, layer: int, u: _Update) -> None:
        start = max(t, self.busy[layer])
        finish = start + self.plan.compute.ps_seconds_per_param * self.plan.layer_params[layer]
        self.busy[layer] = finish
        u.staleness = max(u.staleness, self.versions[layer] - u.read[layer])
        snapshot = None
        if self.execute_math:
            name = self.model.shard_names[layer]
            try:
                solver_step(self.params[layer], u.grads[layer], self.states[layer], name)
            except DivergenceError as e:
                self._diverge(t, u, name, str(e))
                return
            snapshot = [a.copy() for a in self.params[layer]]
        self.versions[layer] += 1
        back = self.plan.network.message_time(self.layer_bytes[layer], self._net_rng(2, u.group, u.local_iter, layer))
        self._push(finish + back, RETURN, u.group, layer, (u, snapshot, self.versions[layer]))
        u.finish = max(u.finish, finish)
        u.pending -= 1
        if u.pending == 0:
            u.grads = None
            self._push(u.finish, DONE, u.group, payload=u)

    def _return(self, t: float, layer: int, payload: Tuple[_Update, Optional[List[np.ndarray]], int]) -> None:
        u, snapshot, version = payload
        grp = self.groups[u.group]
        if version > grp.read[layer]:
            grp.read[layer] = version
            if snapshot is not None:
                grp.params[layer] = snapshot
        u.returns -= 1
        if u.returns == 0 and not self.overlap:
            bcast = broadcast_time(self.model_bytes, self.plan.workers_per_group, self.plan.network,
                                   self._net_rng(3, u.group, u.local_iter))
            self._push(t + bcast, START, u.group)

    def _done(self, t: float, u: _Update) -> None:
        self.global_step += 1
        self.records.append(RunRecord(u.local_iter, u.group, u.start, t, float(u.loss),
                                      self.global_step, int(u.staleness), self.flops))

    def _diverge(self, t: float, u: _Update, layer: Optional[str], message: str) -> None:
        self.global_step += 1
        self.records.append(RunRecord(u.local_iter, u.group, u.start, t, float(u.loss),
                                      self.global_step, int(u.staleness), self.flops))
        self.diverged_at, self.divergence_layer = self.global_step, layer
        audit_log.warning("divergence at global step %d (group %d, layer %s): %s",
                          self.global_step, u.group, layer or "-", message)
        self.heap.clear()

    # ----- main loop ----------------------------------------------------------

    def run(self) -> RunLog:
        handlers = {
            START: lambda t, g, l, p: self._start(t, self.groups[g]),
            READY: lambda t, g, l, p: self._ready(t, p),
            ARRIVAL: lambda t, g, l, p: self._arrival(t, l, p),
            RETURN: lambda t, g, l, p: self._return(t, l, p),
            DONE: lambda t, g, l, p: self._done(t, p),
        }
        for g in range(self.plan.num_groups):
            self._push(0.0, START, g)
        workers = self.threads if self.execute_math else 1
        with ThreadPoolExecutor(max_workers=max(1, workers), thread_name_prefix="grad") as executor:
            self.executor = executor
            try:
                while self.heap:
                    t, g, _, l, _, kind, payload = heapq.heappop(self.heap)
                    handlers[kind](t, g, l, payload)
            finally:
                executor.shutdown(wait=True, cancel_futures=True)
                self.executor = None
        if self.diverged_at is None and len(self.records) != self.iterations:
            raise SimulationError(
                f"event queue drained after {len(self.records)} of {self.iterations} updates")
        engine_log.debug("simulated %d updates in %.6f s", len(self.records),
                         self.records[-1].sim_time_end_s if self.records else 0.0)
        return RunLog(self.records, self.plan.num_groups, self.plan.total_nodes,
                      self.plan.workers_per_group, self.batch, self.model.model_id,
                      self.diverged_at, self.divergence_layer,
                      self.params if self.execute_math else None)


def run_training(plan: ClusterPlan, model: Network, dataset: Optional[Dataset], solver: SolverConfig,
                 batch_per_group: int, iterations: int, seed: int, *, execute_math: bool = True,
                 overlap: bool = False, threads: Optional[int] = None, split: str = "train") -> RunLog:
    """
    Simulate `iterations` global updates. G == 1 reproduces synchronous training exactly;
    G > 1 groups update the per-layer parameter servers asynchronously, in arrival order.
    """
    sim = Simulator(plan, model, dataset, solver, batch_per_group, iterations, seed,
                    execute_math=execute_math, overlap=overlap, threads=threads, split=split)
    return sim.run()
