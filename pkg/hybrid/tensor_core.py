# hybrid/tensor_core.py
# v0.1.0 — float64 kernels for every layer kind the two networks use, plus the
# finite-difference gradient checker. All functions are pure: no shared mutable state.
# Provides: ConvSpec, conv2d_*, deconv2d_*, pool_*, dense_*, relu_*, sigmoid*, softmax_xent, mse, grad_check

from __future__ import annotations
from dataclasses import dataclass
from typing import Any, List, Optional, Protocol, Sequence, Tuple
import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, ValidationError
from .seeding import stream

Tensor = np.ndarray

MAX2X2 = "max2x2stride2"
GLOBAL_AVG = "global_avg"
POOL_KINDS = (MAX2X2, GLOBAL_AVG)

log = logging.getLogger("engine")

# --------------------------- Data Models -------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    pad: int = 0

    def __post_init__(self) -> None:
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"ConvSpec.{name} must be a positive integer")
        if self.pad < 0:
            raise ValidationError("ConvSpec.pad must be non-negative")

    def out_size(self, h: int, w: int) -> Tuple[int, int]:
        ho = (h + 2 * self.pad - self.kernel_h) // self.stride + 1
        wo = (w + 2 * self.pad - self.kernel_w) // self.stride + 1
        if ho < 1 or wo < 1 or h + 2 * self.pad < self.kernel_h or w + 2 * self.pad < self.kernel_w:
            raise ShapeError("conv output", (">=1", ">=1"), (ho, wo))
        return ho, wo

    def deconv_out_size(self, h: int, w: int) -> Tuple[int, int]:
        ho = (h - 1) * self.stride + self.kernel_h - 2 * self.pad
        wo = (w - 1) * self.stride + self.kernel_w - 2 * self.pad
        if ho < 1 or wo < 1:
            raise ShapeError("deconv output", (">=1", ">=1"), (ho, wo))
        return ho, wo

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)


@dataclass(frozen=True)
class PoolState:
    kind: str
    input_shape: Tuple[int, ...]
    argmax: Optional[np.ndarray] = None

# --------------------------- Helpers -----------------------------------------

def _t(x: Any) -> Tensor:
    return np.asarray(x, dtype=np.float64)

def _expect(what: str, arr: Tensor, shape: Sequence[int]) -> None:
    if tuple(arr.shape) != tuple(shape):
        raise ShapeError(what, shape, arr.shape)

def _expect_rank(what: str, arr: Tensor, rank: int) -> None:
    if arr.ndim != rank:
        raise ShapeError(f"{what} (rank {rank})", ("?",) * rank, arr.shape)

def _windows(x: Tensor, spec: ConvSpec) -> Tensor:
    """Receptive-field view of shape (N, C, Ho, Wo, Kh, Kw); no copy."""
    p = spec.pad
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (spec.kernel_h, spec.kernel_w), axis=(2, 3))
    return win[:, :, ::spec.stride, ::spec.stride]

def _conv_backward_data(grad_output: Tensor, weights: Tensor, spec: ConvSpec,
                        in_h: int, in_w: int) -> Tensor:
    # Shared by conv2d_backward and deconv2d_forward; the two must stay bit-identical.
    n, _, ho, wo = grad_output.shape
    p, s = spec.pad, spec.stride
    gxp = np.zeros((n, spec.in_channels, in_h + 2 * p, in_w + 2 * p))
    for ky in range(spec.kernel_h):
        for kx in range(spec.kernel_w):
            contrib = np.tensordot(grad_output, weights[:, :, ky, kx], axes=([1], [0]))
            gxp[:, :, ky:ky + s * (ho - 1) + 1:s, kx:kx + s * (wo - 1) + 1:s] += contrib.transpose(0, 3, 1, 2)
    return gxp[:, :, p:p + in_h, p:p + in_w].copy()

def _conv_weight_grad(x: Tensor, grad_output: Tensor, spec: ConvSpec) -> Tensor:
    win = _windows(x, spec)
    return np.tensordot(grad_output, win, axes=([0, 2, 3], [0, 2, 3]))

# --------------------------- Convolution -------------------------------------

def conv2d_forward(input: Tensor, weights: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """Cross-correlation (no kernel flip): out[n,o,y,x] = bias[o] + sum(input * weights) over the field."""
    x, w, b = _t(input), _t(weights), _t(bias)
    _expect_rank("conv2d input", x, 4)
    if x.shape[1] != spec.in_channels:
        raise ShapeError("conv2d input channels", (x.shape[0], spec.in_channels, *x.shape[2:]), x.shape)
    _expect("conv2d weights", w, spec.weight_shape)
    _expect("conv2d bias", b, (spec.out_channels,))
    spec.out_size(x.shape[2], x.shape[3])
    win = _windows(x, spec)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    return out + b[None, :, None, None]


def conv2d_backward(input: Tensor, weights: Tensor, grad_output: Tensor,
                    spec: ConvSpec) -> Tuple[Tensor, Tensor, Tensor]:
    x, w, g = _t(input), _t(weights), _t(grad_output)
    _expect_rank("conv2d input", x, 4)
    _expect("conv2d weights", w, spec.weight_shape)
    ho, wo = spec.out_size(x.shape[2], x.shape[3])
    _expect("conv2d grad_output", g, (x.shape[0], spec.out_channels, ho, wo))
    grad_input = _conv_backward_data(g, w, spec, x.shape[2], x.shape[3])
    grad_weights = _conv_weight_grad(x, g, spec)
    grad_bias = g.sum(axis=(0, 2, 3))
    return grad_input, grad_weights, grad_bias

# --------------------------- Deconvolution -----------------------------------
# A deconvolution is the data-gradient pass of the convolution described by `spec`:
# weights are laid out [Cin_deconv, Cout_deconv, Kh, Kw] == [spec.out_channels, spec.in_channels, Kh, Kw].

def deconv2d_forward(input: Tensor, weights: Tensor, spec: ConvSpec) -> Tensor:
    x, w = _t(input), _t(weights)
    _expect_rank("deconv2d input", x, 4)
    if x.shape[1] != spec.out_channels:
        raise ShapeError("deconv2d input channels", (x.shape[0], spec.out_channels, *x.shape[2:]), x.shape)
    _expect("deconv2d weights", w, spec.weight_shape)
    ho, wo = spec.deconv_out_size(x.shape[2], x.shape[3])
    if spec.out_size(ho, wo) != tuple(x.shape[2:]):
        raise ShapeError("deconv2d round trip", x.shape[2:], spec.out_size(ho, wo))
    return _conv_backward_data(x, w, spec, ho, wo)


def deconv2d_backward(input: Tensor, weights: Tensor, grad_output: Tensor,
                      spec: ConvSpec) -> Tuple[Tensor, Tensor]:
    """Returns (grad_input, grad_weights); the data gradient is a plain forward convolution."""
    x, w, g = _t(input), _t(weights), _t(grad_output)
    _expect_rank("deconv2d input", x, 4)
    _expect("deconv2d weights", w, spec.weight_shape)
    ho, wo = spec.deconv_out_size(x.shape[2], x.shape[3])
    _expect("deconv2d grad_output", g, (x.shape[0], spec.in_channels, ho, wo))
    grad_input = conv2d_forward(g, w, np.zeros(spec.out_channels), spec)
    grad_weights = _conv_weight_grad(g, x, spec)
    return grad_input, grad_weights

# --------------------------- Pooling -----------------------------------------

def pool_forward(input: Tensor, kind: str) -> Tuple[Tensor, PoolState]:
    x = _t(input)
    _expect_rank("pool input", x, 4)
    n, c, h, w = x.shape
    if kind == MAX2X2:
        if h % 2 or w % 2:
            raise ShapeError("max2x2 pool input (even H, W)", (n, c, h + h % 2, w + w % 2), x.shape)
        cells = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        argmax = cells.argmax(axis=-1)
        out = np.take_along_axis(cells, argmax[..., None], axis=-1)[..., 0]
        return out, PoolState(kind, x.shape, argmax)
    if kind == GLOBAL_AVG:
        return x.mean(axis=(2, 3), keepdims=True), PoolState(kind, x.shape)
    raise ValidationError(f"unknown pool kind: {kind}")


def pool_backward(grad_output: Tensor, saved_state: PoolState, kind: str) -> Tensor:
    g = _t(grad_output)
    if saved_state.kind != kind:
        raise ShapeError(f"pool state kind {saved_state.kind} used for {kind}", (), ())
    n, c, h, w = saved_state.input_shape
    if kind == MAX2X2:
        _expect("max2x2 grad_output", g, (n, c, h // 2, w // 2))
        buf = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(buf, saved_state.argmax[..., None], g[..., None], axis=-1)
        return buf.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    if kind == GLOBAL_AVG:
        _expect("global_avg grad_output", g, (n, c, 1, 1))
        return np.broadcast_to(g / (h * w), (n, c, h, w)).copy()
    raise ValidationError(f"unknown pool kind: {kind}")

# --------------------------- Dense / activations / losses --------------------

def dense_forward(input: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    x, w, b = _t(input), _t(weights), _t(bias)
    _expect_rank("dense input", x, 2)
    _expect_rank("dense weights", w, 2)
    if x.shape[1] != w.shape[0]:
        raise ShapeError("dense weights", (x.shape[1], w.shape[1]), w.shape)
    _expect("dense bias", b, (w.shape[1],))
    return x @ w + b


def dense_backward(input: Tensor, weights: Tensor, grad_output: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    x, w, g = _t(input), _t(weights), _t(grad_output)
    _expect_rank("dense input", x, 2)
    if x.shape[1] != w.shape[0]:
        raise ShapeError("dense weights", (x.shape[1], w.shape[1]), w.shape)
    _expect("dense grad_output", g, (x.shape[0], w.shape[1]))
    return g @ w.T, x.T @ g, g.sum(axis=0)


def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(_t(x), 0.0)


def relu_backward(grad_output: Tensor, x: Tensor) -> Tensor:
    g, x = _t(grad_output), _t(x)
    _expect("relu grad_output", g, x.shape)
    return g * (x > 0)


def sigmoid(x: Tensor) -> Tensor:
    x = _t(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax_xent(logits: Tensor, labels) -> Tuple[float, Tensor]:
    """Mean cross-entropy over the batch and its gradient (softmax - onehot) / N."""
    z = _t(logits)
    _expect_rank("softmax_xent logits", z, 2)
    y = np.asarray(labels)
    n, k = z.shape
    if y.shape != (n,):
        raise ShapeError("softmax_xent labels", (n,), y.shape)
    if n and (not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= k):
        raise ValidationError(f"labels must be integers in [0, {k})")
    logp = log_softmax(z)
    rows = np.arange(n)
    loss = float(-logp[rows, y].mean())
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    return loss, grad / n


def log_softmax(z: Tensor, axis: int = 1) -> Tensor:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def mse(prediction: Tensor, target: Tensor) -> Tuple[float, Tensor]:
    p, t = _t(prediction), _t(target)
    _expect("mse prediction", p, t.shape)
    diff = p - t
    return float((diff * diff).mean()), 2.0 * diff / diff.size

# --------------------------- Gradient checking -------------------------------

class Differentiable(Protocol):
    def params(self) -> List[List[Tensor]]: ...
    def loss(self, params: List[List[Tensor]], inputs: Any, targets: Any) -> float: ...
    def loss_and_grads(self, params: List[List[Tensor]], inputs: Any,
                       targets: Any) -> Tuple[float, List[List[Tensor]]]: ...


def _same_routing(a: Optional[List[np.ndarray]], b: Optional[List[np.ndarray]]) -> bool:
    if a is None or b is None:
        return True
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(network: Differentiable, input: Any, targets: Any, eps: float = 1e-5,
               per_layer: int = 200, seed: int = 0) -> float:
    """
    Max relative error between analytic gradients and central differences over a
    deterministic subsample of at most `per_layer` coordinates per parameter shard.
    Coordinates whose perturbation flips a ReLU mask or a max-pool route are retried
    at eps/10 and skipped if they still straddle the switch.
    """
    if eps <= 0:
        raise ValidationError("grad_check eps must be positive")
    params = [[np.array(a, dtype=np.float64, copy=True) for a in shard] for shard in network.params()]
    _, grads = network.loss_and_grads(params, input, targets)
    routing = getattr(network, "routing_signature", None)
    base_route = routing(params, input) if routing else None

    def central_diff(arr: np.ndarray, i: int, h: float) -> Optional[float]:
        orig = arr.flat[i]
        values, routes = [], []
        for delta in (h, -h):
            arr.flat[i] = orig + delta
            values.append(network.loss(params, input, targets))
            routes.append(routing(params, input) if routing else None)
        arr.flat[i] = orig
        if not all(_same_routing(base_route, r) for r in routes):
            return None
        return (values[0] - values[1]) / (2.0 * h)

    worst, skipped = 0.0, 0
    for si, shard in enumerate(params):
        sizes = [a.size for a in shard]
        total = int(sum(sizes))
        if total == 0:
            continue
        if total <= per_layer:
            picks = np.arange(total)
        else:
            picks = np.sort(stream(seed, "grad_check", si).choice(total, size=per_layer, replace=False))
        offsets = np.cumsum([0] + sizes)
        for flat in picks:
            ai = int(np.searchsorted(offsets, flat, side="right") - 1)
            local = int(flat - offsets[ai])
            numeric = central_diff(shard[ai], local, eps)
            if numeric is None:
                numeric = central_diff(shard[ai], local, eps / 10.0)
            if numeric is None:
                skipped += 1
                continue
            analytic = float(grads[si][ai].flat[local])
            denom = max(abs(analytic), abs(numeric), 1e-12)
            worst = max(worst, abs(analytic - numeric) / denom)
    if skipped:
        log.info("grad_check skipped %d coordinates at non-differentiable switch points", skipped)
    return worst
