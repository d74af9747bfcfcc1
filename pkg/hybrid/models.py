# hybrid/models.py
# v0.1.0 — desk-scale HEP classifier and climate detector/autoencoder, their losses,
# box inference, and the ROC / cut-baseline benchmark utilities.

from __future__ import annotations
from dataclasses import dataclass
from itertools import product
from typing import Any, Dict, List, Optional, Sequence, Tuple
import logging
import math

import numpy as np

from .errors import ShapeError, ValidationError
from .seeding import stream
from .tensor_core import (
    ConvSpec, GLOBAL_AVG, MAX2X2, Tensor,
    conv2d_backward, conv2d_forward, deconv2d_backward, deconv2d_forward,
    dense_backward, dense_forward, log_softmax, mse, pool_backward, pool_forward,
    relu_backward, relu_forward, sigmoid, softmax_xent,
)

log = logging.getLogger("engine")

CONV, DECONV, RELU, MAXPOOL, GAP, DENSE = "conv", "deconv", "relu", "maxpool", "gap", "dense"
CYCLONE, RIVER = 0, 1

Params = List[List[np.ndarray]]

# --------------------------- Layers ------------------------------------------

@dataclass(frozen=True)
class Layer:
    name: str
    kind: str
    spec: Optional[ConvSpec] = None
    dense_in: int = 0
    dense_out: int = 0

    def param_shapes(self) -> List[Tuple[int, ...]]:
        if self.kind == CONV:
            return [self.spec.weight_shape, (self.spec.out_channels,)]
        if self.kind == DECONV:
            return [self.spec.weight_shape, (self.spec.in_channels,)]
        if self.kind == DENSE:
            return [(self.dense_in, self.dense_out), (self.dense_out,)]
        return []

    @property
    def fan_in(self) -> int:
        if self.kind == CONV:
            return self.spec.in_channels * self.spec.kernel_h * self.spec.kernel_w
        if self.kind == DECONV:
            return self.spec.out_channels * self.spec.kernel_h * self.spec.kernel_w
        return self.dense_in

    def out_shape(self, s: Tuple[int, ...]) -> Tuple[int, ...]:
        if self.kind == CONV:
            if s[0] != self.spec.in_channels:
                raise ShapeError(f"{self.name} input", (self.spec.in_channels, *s[1:]), s)
            return (self.spec.out_channels, *self.spec.out_size(s[1], s[2]))
        if self.kind == DECONV:
            if s[0] != self.spec.out_channels:
                raise ShapeError(f"{self.name} input", (self.spec.out_channels, *s[1:]), s)
            return (self.spec.in_channels, *self.spec.deconv_out_size(s[1], s[2]))
        if self.kind == MAXPOOL:
            if s[1] % 2 or s[2] % 2:
                raise ShapeError(f"{self.name} input (even H, W)", (s[0], s[1] + s[1] % 2, s[2] + s[2] % 2), s)
            return (s[0], s[1] // 2, s[2] // 2)
        if self.kind == GAP:
            return (s[0], 1, 1)
        if self.kind == DENSE:
            if int(np.prod(s)) != self.dense_in:
                raise ShapeError(f"{self.name} input", (self.dense_in,), s)
            return (self.dense_out,)
        return tuple(s)

    def forward(self, p: Sequence[np.ndarray], x: Tensor) -> Tuple[Tensor, Any]:
        if self.kind == CONV:
            return conv2d_forward(x, p[0], p[1], self.spec), x
        if self.kind == DECONV:
            return deconv2d_forward(x, p[0], self.spec) + p[1][None, :, None, None], x
        if self.kind == RELU:
            return relu_forward(x), x
        if self.kind in (MAXPOOL, GAP):
            return pool_forward(x, MAX2X2 if self.kind == MAXPOOL else GLOBAL_AVG)
        flat = x.reshape(x.shape[0], -1)
        return dense_forward(flat, p[0], p[1]), (flat, x.shape)

    def backward(self, p: Sequence[np.ndarray], cache: Any, g: Tensor) -> Tuple[Tensor, List[np.ndarray]]:
        if self.kind == CONV:
            gx, gw, gb = conv2d_backward(cache, p[0], g, self.spec)
            return gx, [gw, gb]
        if self.kind == DECONV:
            gx, gw = deconv2d_backward(cache, p[0], g, self.spec)
            return gx, [gw, g.sum(axis=(0, 2, 3))]
        if self.kind == RELU:
            return relu_backward(g, cache), []
        if self.kind in (MAXPOOL, GAP):
            return pool_backward(g, cache, MAX2X2 if self.kind == MAXPOOL else GLOBAL_AVG), []
        flat, shape = cache
        gx, gw, gb = dense_backward(flat, p[0], g)
        return gx.reshape(shape), [gw, gb]

    def routing(self, cache: Any) -> Optional[np.ndarray]:
        if self.kind == RELU:
            return cache > 0
        if self.kind == MAXPOOL:
            return cache.argmax
        return None

# --------------------------- Network -----------------------------------------

class Network:
    """
    Layers plus parameters grouped into shards, one shard per parameter server.
    Every compute method takes `params` explicitly and keeps no per-call state on
    the object, so one network can serve several simulated groups concurrently.
    """

    model_id = "network"

    def __init__(self, name: str, input_shape: Tuple[int, ...], layers: List[Layer],
                 sources: List[int], shards: List[Tuple[str, List[int]]], seed: int = 0):
        self.name = name
        self.input_shape = tuple(input_shape)
        self.layers = layers
        self.sources = sources
        self.shard_names = [n for n, _ in shards]
        self._slots: Dict[int, Tuple[int, int]] = {}
        for si, (_, members) in enumerate(shards):
            offset = 0
            for li in members:
                self._slots[li] = (si, offset)
                offset += len(layers[li].param_shapes())
        self._shapes: List[Tuple[Tuple[int, ...], Tuple[int, ...]]] = []
        try:
            for li, layer in enumerate(layers):
                src = self.input_shape if sources[li] < 0 else self._shapes[sources[li]][1]
                self._shapes.append((src, layer.out_shape(src)))
        except ShapeError as e:
            raise ValidationError(f"cannot build {name}: {e}") from e
        if any(layer.param_shapes() and li not in self._slots for li, layer in enumerate(layers)):
            raise ValidationError(f"cannot build {name}: a parameterized layer has no shard")
        self._params = self._init_params(seed, [members for _, members in shards])

    # ----- parameters ---------------------------------------------------------

    def _init_params(self, seed: int, members: List[List[int]]) -> Params:
        params: Params = []
        for shard in members:
            arrays: List[np.ndarray] = []
            for li in shard:
                layer = self.layers[li]
                shapes = layer.param_shapes()
                rng = stream(seed, "init", li)
                std = math.sqrt(2.0 / layer.fan_in)
                arrays.append(rng.normal(0.0, std, size=shapes[0]))
                arrays.append(np.zeros(shapes[1]))
            params.append(arrays)
        return params

    @property
    def trainable_layer_count(self) -> int:
        return len(self.shard_names)

    def params(self) -> Params:
        return self._params

    def copy_params(self) -> Params:
        return [[a.copy() for a in shard] for shard in self._params]

    def set_params(self, params: Params) -> None:
        if [[a.shape for a in s] for s in params] != [[a.shape for a in s] for s in self._params]:
            raise ValidationError(f"{self.name}: parameter shapes do not match the network")
        self._params = [[np.array(a, dtype=np.float64, copy=True) for a in s] for s in params]

    def shard_sizes(self) -> List[int]:
        return [int(sum(a.size for a in shard)) for shard in self._params]

    def parameter_count(self) -> int:
        return sum(self.shard_sizes())

    def parameter_bytes(self, bytes_per_value: int = 4) -> int:
        return self.parameter_count() * bytes_per_value

    def shards(self) -> List[Tuple[str, List[np.ndarray]]]:
        return list(zip(self.shard_names, self._params))

    def layer_shapes(self, batch: int = 1) -> List[Tuple[Layer, Tuple[int, ...], Tuple[int, ...]]]:
        """(layer, input shape, output shape) for every layer, batch dimension first."""
        return [(layer, (batch, *s[0]), (batch, *s[1])) for layer, s in zip(self.layers, self._shapes)]

    def _layer_params(self, params: Params, li: int) -> List[np.ndarray]:
        if li not in self._slots:
            return []
        si, off = self._slots[li]
        return params[si][off:off + len(self.layers[li].param_shapes())]

    # ----- execution ----------------------------------------------------------

    def _run(self, params: Params, idxs: Sequence[int], x: Tensor) -> Tuple[Tensor, List[Any]]:
        caches = []
        for li in idxs:
            x, cache = self.layers[li].forward(self._layer_params(params, li), x)
            caches.append(cache)
        return x, caches

    def _backprop(self, params: Params, idxs: Sequence[int], caches: List[Any],
                  g: Tensor, grads: Params) -> Tensor:
        for li, cache in zip(reversed(idxs), reversed(caches)):
            g, pg = self.layers[li].backward(self._layer_params(params, li), cache, g)
            if pg:
                si, off = self._slots[li]
                grads[si][off:off + len(pg)] = pg
        return g

    def _zero_grads(self, params: Params) -> Params:
        return [[np.zeros_like(a) for a in shard] for shard in params]

    def _routes(self, idxs: Sequence[int], caches: List[Any]) -> List[np.ndarray]:
        out = []
        for li, cache in zip(idxs, caches):
            r = self.layers[li].routing(cache)
            if r is not None:
                out.append(r)
        return out

    def _check_input(self, x: Tensor) -> Tensor:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != len(self.input_shape) + 1 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"{self.name} input", (x.shape[0] if x.ndim else 0, *self.input_shape), x.shape)
        return x

    def loss(self, params: Params, inputs: Tensor, targets: Any) -> float:
        return self.loss_and_grads(params, inputs, targets, need_grads=False)[0]

    def loss_and_grads(self, params: Params, inputs: Tensor, targets: Any,
                       need_grads: bool = True) -> Tuple[float, Params]:
        raise NotImplementedError

    def routing_signature(self, params: Params, inputs: Tensor) -> List[np.ndarray]:
        raise NotImplementedError


class HepNet(Network):
    model_id = "hep_mini"

    def logits(self, params: Params, x: Tensor) -> Tensor:
        out, _ = self._run(params, range(len(self.layers)), self._check_input(x))
        return out

    def loss_and_grads(self, params, inputs, targets, need_grads=True):
        idxs = range(len(self.layers))
        logits, caches = self._run(params, idxs, self._check_input(inputs))
        loss, g = softmax_xent(logits, targets)
        grads = self._zero_grads(params)
        if need_grads:
            self._backprop(params, list(idxs), caches, g, grads)
        return loss, grads

    def routing_signature(self, params, inputs):
        idxs = range(len(self.layers))
        _, caches = self._run(params, idxs, self._check_input(inputs))
        return self._routes(idxs, caches)

    def predict_scores(self, params: Params, x: Tensor, chunk: int = 256) -> np.ndarray:
        """Signal probability per sample."""
        x = np.asarray(x, dtype=np.float64)
        out = []
        for start in range(0, x.shape[0], chunk):
            z = self.logits(params, x[start:start + chunk])
            out.append(np.exp(log_softmax(z))[:, 1])
        return np.concatenate(out) if out else np.zeros(0)

# --------------------------- HEP builder -------------------------------------

def build_hep_mini(input_shape: Tuple[int, int, int] = (3, 32, 32), filters: int = 16,
                   seed: int = 0, classes: int = 2) -> HepNet:
    """Five conv3x3+ReLU units, max-pool after units 1-4, global average pool, dense -> logits."""
    c, h, w = input_shape
    if h % 16 or w % 16:
        raise ValidationError(f"hep_mini input spatial dims must be divisible by 16, got {h}x{w}")
    if filters < 1:
        raise ValidationError("hep_mini filters must be positive")
    layers: List[Layer] = []
    members: List[Tuple[str, List[int]]] = []
    cin = c
    for unit in range(1, 6):
        members.append((f"conv{unit}", [len(layers)]))
        layers.append(Layer(f"conv{unit}", CONV, ConvSpec(cin, filters, 3, 3, 1, 1)))
        layers.append(Layer(f"relu{unit}", RELU))
        layers.append(Layer(f"pool{unit}", MAXPOOL if unit < 5 else GAP))
        cin = filters
    members.append(("fc", [len(layers)]))
    layers.append(Layer("fc", DENSE, dense_in=filters, dense_out=classes))
    sources = list(range(-1, len(layers) - 1))
    return HepNet("hep_mini", (c, h, w), layers, sources, members, seed)

# --------------------------- Climate types -----------------------------------

@dataclass(frozen=True)
class BoxTarget:
    cell_i: int
    cell_j: int
    confidence: float
    class_id: int
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ValidationError(f"box corner outside image: ({self.x}, {self.y})")
        if not (self.w > 0 and self.h > 0):
            raise ValidationError("box width/height must be positive")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError("box confidence must be in [0, 1]")

    @classmethod
    def from_box(cls, x: float, y: float, w: float, h: float, class_id: int, grid: int) -> "BoxTarget":
        """Target assigned to the grid cell holding the box centre. Row 0 is the bottom edge."""
        i = min(int((y + h / 2.0) * grid), grid - 1)
        j = min(int((x + w / 2.0) * grid), grid - 1)
        return cls(i, j, 1.0, int(class_id), float(x), float(y), float(w), float(h))


@dataclass(frozen=True)
class BoxPrediction:
    sample: int
    cell_i: int
    cell_j: int
    confidence: float
    class_id: int
    x: float
    y: float
    w: float
    h: float


@dataclass
class ClimateLossWeights:
    conf_obj: float = 1.0
    conf_noobj: float = 0.5
    klass: float = 1.0
    box: float = 5.0
    recon: float = 1.0

    def __post_init__(self) -> None:
        vals = [self.conf_obj, self.conf_noobj, self.klass, self.box, self.recon]
        if any(v < 0 for v in vals) or not any(v > 0 for v in vals):
            raise ValidationError("climate loss weights must be non-negative with at least one > 0")


@dataclass
class ClimatePreds:
    """Head outputs split from the fused (5 + classes)-channel map."""
    head: np.ndarray

    @property
    def classes(self) -> int:
        return self.head.shape[1] - 5

    @property
    def conf(self) -> np.ndarray:
        return self.head[:, 0]

    @property
    def cls(self) -> np.ndarray:
        return self.head[:, 1:1 + self.classes]

    @property
    def xy(self) -> np.ndarray:
        return self.head[:, 1 + self.classes:3 + self.classes]

    @property
    def wh(self) -> np.ndarray:
        return self.head[:, 3 + self.classes:5 + self.classes]


@dataclass
class ClimateGrads:
    head: np.ndarray
    reconstruction: np.ndarray

# --------------------------- Climate loss and inference ----------------------

def climate_loss(preds: ClimatePreds, targets: Sequence[Sequence[BoxTarget]], input: Tensor,
                 reconstruction: Tensor, weights: ClimateLossWeights) -> Tuple[float, ClimateGrads]:
    """
    Joint detection + reconstruction objective, averaged over the batch:
    conf(obj) + conf(noobj) + class xent on object cells + box offsets (sqrt w, h) + recon MSE.
    """
    head = np.asarray(preds.head, dtype=np.float64)
    n, _, grid, grid_w = head.shape
    k = head.shape[1] - 5
    if k < 1 or grid != grid_w:
        raise ShapeError("climate head", (n, "5+classes", grid, grid), head.shape)
    if len(targets) != n:
        raise ValidationError(f"expected {n} target lists, got {len(targets)}")
    obj = np.zeros((n, grid, grid), dtype=bool)
    for s, boxes in enumerate(targets):
        for t in boxes:
            if not (0 <= t.cell_i < grid and 0 <= t.cell_j < grid):
                raise ValidationError(f"target cell ({t.cell_i}, {t.cell_j}) outside {grid}x{grid} grid")
            if not 0 <= t.class_id < k:
                raise ValidationError(f"target class {t.class_id} outside [0, {k})")
            if obj[s, t.cell_i, t.cell_j]:
                raise ValidationError(f"two targets in cell ({t.cell_i}, {t.cell_j}) of sample {s}")
            obj[s, t.cell_i, t.cell_j] = True

    grad = np.zeros_like(head)
    conf = sigmoid(head[:, 0])
    dconf = conf * (1.0 - conf)
    conf_obj = float(((1.0 - conf) ** 2)[obj].sum())
    conf_noobj = float((conf ** 2)[~obj].sum())
    grad[:, 0] = np.where(obj, -2.0 * (1.0 - conf) * dconf * weights.conf_obj,
                          2.0 * conf * dconf * weights.conf_noobj) / n

    class_term, box_term = 0.0, 0.0
    for s, boxes in enumerate(targets):
        for t in boxes:
            i, j = t.cell_i, t.cell_j
            lp = log_softmax(head[s, 1:1 + k, i, j][None, :])[0]
            class_term += -float(lp[t.class_id])
            gc = np.exp(lp)
            gc[t.class_id] -= 1.0
            grad[s, 1:1 + k, i, j] = gc * weights.klass / n
            target = np.array([t.x * grid - j, t.y * grid - i, math.sqrt(t.w), math.sqrt(t.h)])
            d = head[s, 1 + k:5 + k, i, j] - target
            box_term += float((d * d).sum())
            grad[s, 1 + k:5 + k, i, j] = 2.0 * d * weights.box / n

    recon_term, grad_recon = mse(reconstruction, input)
    loss = (weights.conf_obj * conf_obj + weights.conf_noobj * conf_noobj
            + weights.klass * class_term + weights.box * box_term) / n + weights.recon * recon_term
    return loss, ClimateGrads(grad, grad_recon * weights.recon)


def infer_boxes(preds: ClimatePreds, threshold: float = 0.8) -> List[BoxPrediction]:
    """One candidate per grid cell; keep cells whose sigmoid confidence exceeds `threshold`."""
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError("threshold must be in [0, 1]")
    head = np.asarray(preds.head, dtype=np.float64)
    n, _, grid, _ = head.shape
    k = preds.classes
    conf = sigmoid(head[:, 0])
    boxes: List[BoxPrediction] = []
    for s, i, j in zip(*np.nonzero(conf > threshold)):
        px, py, pw, ph = head[s, 1 + k:5 + k, i, j]
        boxes.append(BoxPrediction(
            sample=int(s), cell_i=int(i), cell_j=int(j), confidence=float(conf[s, i, j]),
            class_id=int(np.argmax(head[s, 1:1 + k, i, j])),
            x=float(np.clip((j + px) / grid, 0.0, 1.0)), y=float(np.clip((i + py) / grid, 0.0, 1.0)),
            w=max(float(pw), 1e-3) ** 2, h=max(float(ph), 1e-3) ** 2,
        ))
    return boxes

# --------------------------- Climate network ---------------------------------

class ClimateNet(Network):
    model_id = "climate_mini"

    def __init__(self, *args, encoder: List[int], head: int, decoder: List[int],
                 loss_weights: ClimateLossWeights, **kwargs):
        self.encoder, self.head_index, self.decoder = encoder, head, decoder
        self.loss_weights = loss_weights
        super().__init__(*args, **kwargs)

    def forward(self, params: Params, x: Tensor):
        x = self._check_input(x)
        feats, enc_c = self._run(params, self.encoder, x)
        head, head_c = self._run(params, [self.head_index], feats)
        recon, dec_c = self._run(params, self.decoder, feats)
        return ClimatePreds(head), recon, (x, enc_c, head_c, dec_c)

    def loss_and_grads(self, params, inputs, targets, need_grads=True):
        preds, recon, (x, enc_c, head_c, dec_c) = self.forward(params, inputs)
        loss, lg = climate_loss(preds, targets, x, recon, self.loss_weights)
        grads = self._zero_grads(params)
        if need_grads:
            g_head = self._backprop(params, [self.head_index], head_c, lg.head, grads)
            g_dec = self._backprop(params, self.decoder, dec_c, lg.reconstruction, grads)
            self._backprop(params, self.encoder, enc_c, g_head + g_dec, grads)
        return loss, grads

    def routing_signature(self, params, inputs):
        _, _, (_, enc_c, _, dec_c) = self.forward(params, inputs)
        return self._routes(self.encoder, enc_c) + self._routes(self.decoder, dec_c)

    def predict(self, params: Params, x: Tensor, chunk: int = 64) -> Tuple[ClimatePreds, np.ndarray]:
        heads, recons = [], []
        x = np.asarray(x, dtype=np.float64)
        for start in range(0, x.shape[0], chunk):
            p, r, _ = self.forward(params, x[start:start + chunk])
            heads.append(p.head)
            recons.append(r)
        return ClimatePreds(np.concatenate(heads)), np.concatenate(recons)


def build_climate_mini(input_shape: Tuple[int, int, int] = (8, 64, 64), grid: int = 8, classes: int = 2,
                       filters: int = 16, encoder_convs: int = 3, decoder_deconvs: int = 3, seed: int = 0,
                       loss_weights: Optional[ClimateLossWeights] = None) -> ClimateNet:
    """
    Strided-conv encoder -> fused 1x1 detection head on the coarse grid, and a deconv
    decoder reconstructing the input. The head's parameters ride in the shard of the
    last encoder conv, so trainable_layer_count == encoder_convs + decoder_deconvs.
    """
    c, h, w = input_shape
    if grid < 1 or h % grid or w % grid or h // grid != w // grid:
        raise ValidationError(f"climate_mini input {h}x{w} does not tile a {grid}x{grid} grid")
    factor = h // grid
    steps = int(round(math.log2(factor))) if factor >= 1 else -1
    if steps < 0 or 2 ** steps != factor:
        raise ValidationError(f"climate_mini downsampling {factor} must be a power of two")
    if encoder_convs < max(steps, 1) or decoder_deconvs < max(steps, 1):
        raise ValidationError(f"climate_mini needs at least {max(steps, 1)} encoder convs and decoder deconvs")
    if classes < 1 or filters < 1:
        raise ValidationError("climate_mini classes and filters must be positive")

    layers: List[Layer] = []
    sources: List[int] = []
    shards: List[Tuple[str, List[int]]] = []
    encoder: List[int] = []
    cin = c
    for e in range(encoder_convs):
        stride = 2 if e < steps else 1
        shards.append((f"enc{e + 1}", [len(layers)]))
        for layer in (Layer(f"enc{e + 1}", CONV, ConvSpec(cin, filters, 3, 3, stride, 1)),
                      Layer(f"enc{e + 1}_relu", RELU)):
            encoder.append(len(layers))
            sources.append(len(layers) - 1)
            layers.append(layer)
        cin = filters
    feat = len(layers) - 1

    head = len(layers)
    shards[-1][1].append(head)
    layers.append(Layer("head", CONV, ConvSpec(filters, 5 + classes, 1, 1, 1, 0)))
    sources.append(feat)

    decoder: List[int] = []
    for d in range(decoder_deconvs):
        upsample = d >= decoder_deconvs - steps
        out_c = c if d == decoder_deconvs - 1 else filters
        spec = ConvSpec(out_c, filters, 4, 4, 2, 1) if upsample else ConvSpec(out_c, filters, 3, 3, 1, 1)
        shards.append((f"dec{d + 1}", [len(layers)]))
        block = [Layer(f"dec{d + 1}", DECONV, spec)]
        if d < decoder_deconvs - 1:
            block.append(Layer(f"dec{d + 1}_relu", RELU))
        for layer in block:
            sources.append(feat if not decoder else len(layers) - 1)
            decoder.append(len(layers))
            layers.append(layer)

    return ClimateNet("climate_mini", (c, h, w), layers, sources, shards, seed,
                      encoder=encoder, head=head, decoder=decoder,
                      loss_weights=loss_weights or ClimateLossWeights())

# --------------------------- Benchmarks --------------------------------------

def roc_tpr_at_fpr(scores: Sequence[float], labels: Sequence[int], target_fpr: float) -> float:
    """Best TPR over score thresholds (predict signal when score >= threshold) with FPR <= target."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ShapeError("roc scores/labels", s.shape, y.shape)
    if not 0.0 < target_fpr < 1.0:
        raise ValidationError("target_fpr must be in (0, 1)")
    pos, neg = int(y.sum()), int((~y).sum())
    if pos == 0 or neg == 0:
        raise ValidationError("ROC needs both signal and background samples")
    order = np.lexsort((np.arange(s.size), -s))
    ss, ys = s[order], y[order]
    tp, fp = np.cumsum(ys), np.cumsum(~ys)
    ends = np.flatnonzero(np.r_[ss[1:] != ss[:-1], True])
    tpr, fpr = tp[ends] / pos, fp[ends] / neg
    ok = fpr <= target_fpr
    return float(tpr[ok].max()) if ok.any() else 0.0


@dataclass(frozen=True)
class CutBaseline:
    """One lower cut per summary feature; the selection is the AND of all cuts."""
    thresholds: Tuple[float, ...]
    scales: Tuple[float, ...]             # background std per feature

    def passed(self, features: np.ndarray) -> np.ndarray:
        x = self._check(features)
        return (x > np.asarray(self.thresholds)[None, :]).sum(axis=1)

    def scores(self, features: np.ndarray) -> np.ndarray:
        """Cuts passed, ordered within each count by the smallest standardized margin."""
        x = self._check(features)
        thr = np.asarray(self.thresholds)[None, :]
        margin = ((x - thr) / np.asarray(self.scales)[None, :]).min(axis=1)
        frac = np.minimum(0.5 * (1.0 + np.tanh(0.5 * margin)), np.nextafter(1.0, 0.0))
        return (x > thr).sum(axis=1) + frac

    def _check(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != len(self.thresholds):
            raise ShapeError("cut features", (-1, len(self.thresholds)), x.shape)
        return x


def fit_cut_baseline(features: np.ndarray, labels: np.ndarray, target_fpr: float = 0.002,
                     grid: int = 12) -> CutBaseline:
    """Grid search over per-feature background quantiles for the AND of cuts with the
    highest signal efficiency whose background efficiency stays <= `target_fpr`."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ShapeError("cut features/labels", (y.size, -1), x.shape)
    if not 0.0 < target_fpr < 1.0:
        raise ValidationError("target_fpr must be in (0, 1)")
    if y.all() or not y.any():
        raise ValidationError("cut fit needs both signal and background samples")
    sig, bkg = x[y], x[~y]
    levels = np.unique(np.r_[np.linspace(0.5, 1.0, grid), 1.0 - np.geomspace(0.05, target_fpr / 2, grid)])
    candidates = [np.unique(np.r_[-np.inf, np.quantile(bkg[:, f], levels, method="higher")])
                  for f in range(x.shape[1])]
    # (candidate, sample) pass tables; the last feature is swept in one matrix product
    sig_pass = [sig[None, :, f] > c[:, None] for f, c in enumerate(candidates)]
    bkg_pass = [bkg[None, :, f] > c[:, None] for f, c in enumerate(candidates)]
    last_sig, last_bkg = sig_pass[-1].astype(np.float64), bkg_pass[-1].astype(np.float64)

    best, best_key = None, (-1.0, -np.inf)
    for head in product(*(range(c.size) for c in candidates[:-1])):
        s = np.ones(sig.shape[0], dtype=bool)
        b = np.ones(bkg.shape[0], dtype=bool)
        for f, k in enumerate(head):
            s &= sig_pass[f][k]
            b &= bkg_pass[f][k]
        tpr = (last_sig @ s.astype(np.float64)) / sig.shape[0]
        fpr = (last_bkg @ b.astype(np.float64)) / bkg.shape[0]
        ok = np.flatnonzero(fpr <= target_fpr)
        if ok.size == 0:
            continue
        k = int(ok[np.lexsort((fpr[ok], -tpr[ok]))[0]])
        key = (float(tpr[k]), -float(fpr[k]))
        if key > best_key:
            best, best_key = (*head, k), key

    thresholds = tuple(float(candidates[f][k]) for f, k in enumerate(best))
    scales = tuple(float(max(v, 1e-12)) for v in bkg.std(axis=0))
    log.info("cut baseline thresholds %s: signal eff %.4f at background eff %.5f on the fit split",
             thresholds, best_key[0], -best_key[1])
    return CutBaseline(thresholds, scales)


def baseline_cut_classifier(dataset, target_fpr: float = 0.002, grid: int = 12,
                            fit_split: str = "train") -> np.ndarray:
    """Cut-baseline scores for every sample; cuts fit on `fit_split` (all samples if it is single-class)."""
    if len(dataset) == 0:
        raise ValidationError("baseline_cut_classifier needs a non-empty dataset")
    idx = dataset.indices(fit_split)
    y = dataset.labels[idx]
    if idx.size == 0 or y.all() or not y.any():
        idx = np.arange(len(dataset))
    baseline = fit_cut_baseline(dataset.features[idx], dataset.labels[idx], target_fpr, grid)
    return baseline.scores(dataset.features)


def vortex_recall(net: ClimateNet, params: Params, images: np.ndarray,
                  targets: Sequence[Sequence[BoxTarget]], threshold: float = 0.8,
                  class_id: int = CYCLONE) -> float:
    """Fraction of injected boxes of `class_id` whose cell yields a prediction of that class."""
    preds, _ = net.predict(params, images)
    found = {(b.sample, b.cell_i, b.cell_j) for b in infer_boxes(preds, threshold) if b.class_id == class_id}
    wanted = [(s, t.cell_i, t.cell_j) for s, boxes in enumerate(targets) for t in boxes if t.class_id == class_id]
    if not wanted:
        raise ValidationError(f"no injected boxes of class {class_id}")
    return sum(1 for key in wanted if key in found) / len(wanted)
