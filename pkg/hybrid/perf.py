# hybrid/perf.py
# v0.1.0 — analytic FLOP accounting (multiply-add = 2 FLOPs), peak / sustained rates
# over a RunLog, and strong/weak scaling tables with CSV and SVG emission.

from __future__ import annotations
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple, Union
import csv
import logging

import numpy as np

from .errors import ValidationError
from .models import CONV, DECONV, DENSE, GAP, MAXPOOL, RELU, Layer, Network

log = logging.getLogger("harness")

SYNC = "sync"

# --------------------------- FLOP model --------------------------------------

@dataclass(frozen=True)
class LayerFlops:
    name: str
    kind: str
    forward: int
    backward: int


@dataclass(frozen=True)
class FlopModel:
    batch: int
    layers: Tuple[LayerFlops, ...]

    @property
    def forward(self) -> int:
        return sum(l.forward for l in self.layers)

    @property
    def backward(self) -> int:
        return sum(l.backward for l in self.layers)

    @property
    def total(self) -> int:
        return self.forward + self.backward


def layer_flops(layer: Layer, input_shape: Sequence[int], output_shape: Sequence[int]) -> Tuple[int, int]:
    """
    (forward, backward) FLOPs for one layer; shapes include the batch dimension.
    conv/deconv/dense backward is twice the forward (data pass + weight pass).
    """
    n = int(input_shape[0])
    if n < 1:
        raise ValidationError("layer_flops needs batch >= 1")
    if layer.kind == CONV:
        s = layer.spec
        ho, wo = int(output_shape[2]), int(output_shape[3])
        fwd = 2 * s.kernel_h * s.kernel_w * s.in_channels * s.out_channels * ho * wo * n
        return fwd, 2 * fwd
    if layer.kind == DECONV:
        # the equivalent convolution maps the deconv output back onto the deconv input grid
        s = layer.spec
        h, w = int(input_shape[2]), int(input_shape[3])
        fwd = 2 * s.kernel_h * s.kernel_w * s.in_channels * s.out_channels * h * w * n
        return fwd, 2 * fwd
    if layer.kind == DENSE:
        fwd = 2 * layer.dense_in * layer.dense_out * n
        return fwd, 2 * fwd
    if layer.kind in (RELU, MAXPOOL, GAP):
        out = int(np.prod(output_shape))
        return out, out
    raise ValidationError(f"layer_flops: unknown layer kind {layer.kind!r}")


def flop_model(network: Network, batch: int) -> FlopModel:
    if batch < 1:
        raise ValidationError("flop_model needs batch >= 1")
    rows = []
    for layer, ins, outs in network.layer_shapes(batch):
        fwd, bwd = layer_flops(layer, ins, outs)
        rows.append(LayerFlops(layer.name, layer.kind, fwd, bwd))
    return FlopModel(batch, tuple(rows))


def model_flops(network: Network, batch: int) -> int:
    """Forward + backward FLOPs of one training step on `batch` samples."""
    return flop_model(network, batch).total

# --------------------------- RunLog analysis ---------------------------------

def update_intervals(runlog) -> np.ndarray:
    """Per-update time: gap between consecutive global-step completions (first: its own span)."""
    recs = sorted(runlog.records, key=lambda r: r.global_step)
    if not recs:
        return np.zeros(0)
    ends = np.array([r.sim_time_end_s for r in recs])
    out = np.empty(len(recs))
    out[0] = recs[0].sim_time_end_s - recs[0].sim_time_start_s
    out[1:] = np.diff(ends)
    return out


def _ordered_flops(runlog) -> np.ndarray:
    return np.array([r.flops for r in sorted(runlog.records, key=lambda r: r.global_step)], dtype=np.float64)


def _rate_intervals(runlog) -> Tuple[np.ndarray, np.ndarray]:
    """(durations, flops) per interval; zero-duration updates fold into the preceding interval."""
    t, f = update_intervals(runlog), _ordered_flops(runlog)
    keep = t > 0
    if not keep.any():
        raise ValidationError("runlog has no update with positive duration")
    owner = np.maximum(np.cumsum(keep) - 1, 0)
    return t[keep], np.bincount(owner, weights=f, minlength=int(keep.sum()))


def peak_sustained(runlog, window: int) -> Tuple[float, float]:
    """
    peak = max per-interval FLOP rate; sustained = rate of the fastest contiguous `window`
    intervals. Both use the same intervals, so sustained never exceeds peak.
    """
    if window < 1:
        raise ValidationError("window must be >= 1")
    if window > len(runlog.records):
        raise ValidationError(f"window {window} exceeds the {len(runlog.records)} recorded updates")
    t, f = _rate_intervals(runlog)
    peak = float((f / t).max())
    w = min(window, t.size)
    tc = np.concatenate([[0.0], np.cumsum(t)])
    fc = np.concatenate([[0.0], np.cumsum(f)])
    wt = tc[w:] - tc[:-w]
    wf = fc[w:] - fc[:-w]
    best = int(np.argmin(wt))
    return peak, float(wf[best] / wt[best])


def sustained_time_per_update(runlog, window: int) -> float:
    t = update_intervals(runlog)
    if t.size == 0:
        raise ValidationError("runlog has no updates")
    w = min(window, t.size)
    tc = np.concatenate([[0.0], np.cumsum(t)])
    return float((tc[w:] - tc[:-w]).min() / w)

# --------------------------- Scaling -----------------------------------------

@dataclass(frozen=True)
class ScalingRow:
    mode: str
    nodes: int
    groups: int
    batch_per_update: int
    time_per_update_s: float
    samples_per_s: float
    speedup: float
    efficiency: float


def mode_name(groups: int) -> str:
    return SYNC if groups == 1 else f"hybrid-{groups}"


def scaling_report(runlogs: Mapping[Tuple[str, int], object], window: int) -> List[ScalingRow]:
    """
    Speedup = sample throughput at P nodes over the 1-node baseline; efficiency = speedup / P.
    At fixed batch per update this reduces to t_update(1) / t_update(P).
    """
    if not runlogs:
        raise ValidationError("scaling_report needs at least one runlog")
    base_key = (SYNC, 1) if (SYNC, 1) in runlogs else next((k for k in sorted(runlogs) if k[1] == 1), None)
    if base_key is None:
        raise ValidationError("scaling_report needs a 1-node baseline run")

    def throughput(log_) -> Tuple[float, float]:
        tpu = sustained_time_per_update(log_, window)
        return tpu, log_.batch_per_group / tpu

    _, base = throughput(runlogs[base_key])
    rows = []
    for (mode, nodes), rl in sorted(runlogs.items(), key=lambda kv: (kv[0][0] != SYNC, kv[0][0], kv[0][1])):
        tpu, thr = throughput(rl)
        speedup = thr / base
        rows.append(ScalingRow(mode, nodes, rl.groups, rl.batch_per_group, tpu, thr, speedup, speedup / nodes))
    return rows


def write_scaling_csv(rows: Sequence[ScalingRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f.name for f in fields(ScalingRow)])
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in asdict(row).values()])
    return path


def read_scaling_csv(path: Union[str, Path]) -> List[ScalingRow]:
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            out.append(ScalingRow(rec["mode"], int(rec["nodes"]), int(rec["groups"]),
                                  int(rec["batch_per_update"]), float(rec["time_per_update_s"]),
                                  float(rec["samples_per_s"]), float(rec["speedup"]), float(rec["efficiency"])))
    return out


def write_scaling_svg(rows: Sequence[ScalingRow], path: Union[str, Path], title: str = "scaling") -> Path:
    """Speedup vs nodes, one line per mode, plus the ideal diagonal."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    by_mode: Dict[str, List[ScalingRow]] = {}
    for row in rows:
        by_mode.setdefault(row.mode, []).append(row)
    plt.rcParams["svg.hashsalt"] = "hybridtrain"
    fig, ax = plt.subplots(figsize=(6, 4))
    nodes = sorted({r.nodes for r in rows})
    ax.plot(nodes, nodes, linestyle=":", color="grey", label="ideal")
    for mode in sorted(by_mode, key=lambda m: (m != SYNC, m)):
        pts = sorted(by_mode[mode], key=lambda r: r.nodes)
        ax.plot([r.nodes for r in pts], [r.speedup for r in pts], marker="o", label=mode)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log", base=2)
    ax.set_xlabel("nodes")
    ax.set_ylabel("speedup")
    ax.set_title(title)
    ax.legend()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
