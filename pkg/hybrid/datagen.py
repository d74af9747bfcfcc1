# hybrid/datagen.py
# v0.1.0 — deterministic synthetic HEP-like and climate-like datasets and the "DLSD"
# little-endian binary container they (and RunLogs) are persisted in.

from __future__ import annotations
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import ClassVar, List, Sequence, Tuple, Union
import hashlib
import logging
import math
import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, ValidationError
from .models import CYCLONE, RIVER, BoxTarget
from .seeding import stream

MAGIC = b"DLSD"
VERSION = 1
HEP_KIND, CLIMATE_KIND, RUNLOG_KIND = 1, 2, 3
SPLITS = ("train", "val", "test")

log = logging.getLogger("engine")

PathLike = Union[str, Path]

# --------------------------- Data Models -------------------------------------

@dataclass(eq=False)
class HepDataset:
    images: np.ndarray                  # (N, 3, H, W): ECAL-like, HCAL-like, track counts
    labels: np.ndarray                  # (N,) 1 = signal, 0 = background
    features: np.ndarray                # (N, 3): total energy, hit count, max-cluster energy
    seed: int = 0

    kind: ClassVar[int] = HEP_KIND
    FEATURES: ClassVar[Tuple[str, ...]] = ("total_energy", "hit_count", "max_cluster_energy")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def indices(self, split: str) -> np.ndarray:
        return split_indices(self.seed, len(self), split)

    def take(self, idx: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(idx, dtype=np.int64)
        return self.images[idx], self.labels[idx]


@dataclass(eq=False)
class ClimateDataset:
    images: np.ndarray                  # (N, C, H, W); row 0 is the southern edge
    boxes: List[List[BoxTarget]] = field(default_factory=list)
    grid: int = 8
    seed: int = 0

    kind: ClassVar[int] = CLIMATE_KIND

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def indices(self, split: str) -> np.ndarray:
        return split_indices(self.seed, len(self), split)

    def take(self, idx: Sequence[int]) -> Tuple[np.ndarray, List[List[BoxTarget]]]:
        idx = np.asarray(idx, dtype=np.int64)
        return self.images[idx], [self.boxes[i] for i in idx]


Dataset = Union[HepDataset, ClimateDataset]

# --------------------------- Splits ------------------------------------------

@lru_cache(maxsize=32)
def _buckets(seed: int, n: int) -> np.ndarray:
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        digest = hashlib.blake2b(f"{seed}:{i}".encode("utf-8"), digest_size=8).digest()
        out[i] = int.from_bytes(digest, "little") % 10
    out.setflags(write=False)
    return out


def split_indices(seed: int, n: int, split: str) -> np.ndarray:
    """80/10/10 train/val/test membership from a per-sample hash of (seed, index)."""
    if split not in SPLITS:
        raise ValidationError(f"split must be one of {SPLITS}, got {split!r}")
    b = _buckets(int(seed), int(n))
    if split == "train":
        return np.flatnonzero(b < 8)
    return np.flatnonzero(b == (8 if split == "val" else 9))

# --------------------------- HEP generator -----------------------------------

_yy, _xx = np.mgrid[-1:2, -1:2]
_CLUSTER = np.exp(-(_yy ** 2 + _xx ** 2) / (2 * 0.8 ** 2))
_CLUSTER /= _CLUSTER.sum()

MAX_BACKGROUND_CLUSTERS = 12
FILTER_ATTEMPTS = 50


def _deposit(img: np.ndarray, rng: np.random.Generator, r: int, c: int, energy: float) -> None:
    ecal = rng.uniform(0.3, 0.9)
    img[0, r - 1:r + 2, c - 1:c + 2] += ecal * energy * _CLUSTER
    img[1, r - 1:r + 2, c - 1:c + 2] += (1.0 - ecal) * energy * _CLUSTER
    img[2, r, c] += 1 + rng.poisson(1.5)


def _hep_image(seed: int, index: int, attempt: int, signal: bool, size: int) -> np.ndarray:
    rng = stream(seed, "hep_sample", index, attempt)
    img = np.zeros((3, size, size))
    k = min(int(rng.poisson(4.0)), MAX_BACKGROUND_CLUSTERS)
    for _ in range(k):
        r, c = rng.integers(1, size - 1, size=2)
        _deposit(img, rng, int(r), int(c), float(rng.lognormal(0.0, 0.6)))
    if signal:
        # three clusters within radius 3 of a common centre, each at twice the median energy
        r0, c0 = rng.integers(4, size - 4, size=2)
        for _ in range(3):
            angle, radius = rng.uniform(0.0, 2 * math.pi), rng.uniform(1.0, 3.0)
            r = int(np.clip(round(r0 + radius * math.sin(angle)), 1, size - 2))
            c = int(np.clip(round(c0 + radius * math.cos(angle)), 1, size - 2))
            _deposit(img, rng, r, c, 2.0 * float(rng.lognormal(0.0, 0.15)))
    return img.astype(np.float32).astype(np.float64)


def hep_features(img: np.ndarray) -> np.ndarray:
    calo = img[0] + img[1]
    max_cluster = sliding_window_view(calo, (3, 3)).sum(axis=(-2, -1)).max()
    return np.array([calo.sum(), float(np.count_nonzero(calo)), max_cluster])


def gen_hep(seed: int, n: int, signal_fraction: float = 0.09, size: int = 32,
            threads: int = 1) -> HepDataset:
    """
    Background events carry k ~ Poisson(4) Gaussian energy clusters; signal events add a
    compact three-cluster motif. Signal events more energetic than the 90th percentile of
    the background are redrawn so energy alone does not separate the classes.
    """
    if n <= 0:
        raise ValidationError("gen_hep needs n > 0")
    if not 0.0 < signal_fraction < 1.0:
        raise ValidationError(f"signal_fraction must be in (0, 1), got {signal_fraction}")
    if size < 16:
        raise ValidationError("gen_hep image size must be >= 16")
    labels = np.array([int(stream(seed, "hep_label", i).random() < signal_fraction) for i in range(n)],
                      dtype=np.int64)

    def draw(i: int, attempt: int = 0) -> np.ndarray:
        return _hep_image(seed, i, attempt, bool(labels[i]), size)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        images = list(pool.map(draw, range(n)))
    energy = np.array([img[0].sum() + img[1].sum() for img in images])
    bkg = energy[labels == 0]
    if bkg.size:
        ceiling = float(np.quantile(bkg, 0.9))
        redrawn = 0
        for i in np.flatnonzero((labels == 1) & (energy > ceiling)):
            best, best_e = images[i], energy[i]
            for attempt in range(1, FILTER_ATTEMPTS + 1):
                img = draw(int(i), attempt)
                e = img[0].sum() + img[1].sum()
                if e < best_e:
                    best, best_e = img, e
                if e <= ceiling:
                    break
            images[i] = best
            redrawn += 1
        log.debug("gen_hep redrew %d signal events above background p90 %.3f", redrawn, ceiling)
    stacked = np.stack(images)
    features = np.stack([hep_features(img) for img in stacked])
    return HepDataset(stacked, labels, features, seed)

# --------------------------- Climate generator -------------------------------

def _background(rng: np.random.Generator, channels: int, size: int) -> np.ndarray:
    rows, cols = np.mgrid[0:size, 0:size] / size
    img = np.zeros((channels, size, size))
    for ch in range(channels):
        for _ in range(3):
            fy, fx = rng.integers(0, 3, size=2)
            phase = rng.uniform(0.0, 2 * math.pi)
            img[ch] += 0.5 * np.sin(2 * math.pi * (fy * rows + (fx + 1) * cols) + phase)
    return img


def _vortex(img: np.ndarray, rng: np.random.Generator, size: int) -> Tuple[float, float, float, float]:
    radius = float(rng.uniform(3.0, 6.0))
    lo, hi = int(math.ceil(radius)) + 1, size - int(math.ceil(radius)) - 1
    cy, cx = (float(v) + 0.5 for v in rng.integers(lo, hi, size=2))
    rows, cols = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = rows - cy, cols - cx
    d2 = dy * dy + dx * dx
    core = np.exp(-d2 / (2 * (radius / 2) ** 2))
    amp = float(rng.uniform(7.0, 9.0))
    img[0] += amp * core
    swirl = 3.0 * core / np.sqrt(d2 + 1.0)
    img[1] += -dy * swirl
    if img.shape[0] > 2:
        img[2] += dx * swirl
    if img.shape[0] > 4:
        img[4] += 0.5 * amp * core
    return (cx - radius) / size, (cy - radius) / size, 2 * radius / size, 2 * radius / size


def _river(img: np.ndarray, rng: np.random.Generator, size: int) -> Tuple[float, float, float, float]:
    length = float(rng.uniform(0.35, 0.6) * size)
    angle = math.radians(45.0 + rng.uniform(-15.0, 15.0)) * (1 if rng.random() < 0.5 else -1)
    ly, lx = length * math.sin(angle), length * math.cos(angle)
    pad = 2.0
    y_lo = pad - min(ly, 0.0)
    y_hi = size - pad - max(ly, 0.0)
    x_hi = size - pad - lx
    y0, x0 = float(rng.uniform(y_lo, y_hi)), float(rng.uniform(pad, x_hi))
    rows, cols = np.mgrid[0:size, 0:size] + 0.5
    t = np.clip(((rows - y0) * ly + (cols - x0) * lx) / (length * length), 0.0, 1.0)
    dist2 = (rows - (y0 + t * ly)) ** 2 + (cols - (x0 + t * lx)) ** 2
    filament = np.exp(-dist2 / (2 * 1.5 ** 2))
    ch = 3 if img.shape[0] > 3 else img.shape[0] - 1
    img[ch] += 3.0 * filament
    if img.shape[0] > 5:
        img[5] += 1.5 * filament
    bottom, top = min(y0, y0 + ly) - pad, max(y0, y0 + ly) + pad
    left, right = x0 - pad, x0 + lx + pad
    return left / size, bottom / size, (right - left) / size, (top - bottom) / size


def _climate_sample(seed: int, index: int, channels: int, size: int,
                    grid: int) -> Tuple[np.ndarray, List[BoxTarget]]:
    rng = stream(seed, "climate_sample", index)
    img = _background(rng, channels, size)
    boxes: List[BoxTarget] = []
    taken = set()
    for _ in range(int(rng.integers(0, 4))):
        kind = CYCLONE if rng.random() < 0.5 else RIVER
        for _ in range(20):
            trial = img.copy()
            x, y, w, h = (_vortex if kind == CYCLONE else _river)(trial, rng, size)
            x, y = max(x, 0.0), max(y, 0.0)
            w, h = min(w, 1.0 - x), min(h, 1.0 - y)
            target = BoxTarget.from_box(x, y, w, h, kind, grid)
            if (target.cell_i, target.cell_j) not in taken:
                taken.add((target.cell_i, target.cell_j))
                img = trial
                boxes.append(target)
                break
    return img.astype(np.float32).astype(np.float64), boxes


def gen_climate(seed: int, n: int, channels: int = 8, size: int = 64, grid: int = 8,
                threads: int = 1) -> ClimateDataset:
    """Smooth multi-channel fields with 0-3 injected cyclone-like vortices or river-like filaments."""
    if n <= 0:
        raise ValidationError("gen_climate needs n > 0")
    if channels < 3:
        raise ValidationError("gen_climate needs at least 3 channels")
    if size < 16 or size % grid:
        raise ValidationError(f"gen_climate size {size} must be >= 16 and divisible by grid {grid}")
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        samples = list(pool.map(lambda i: _climate_sample(seed, i, channels, size, grid), range(n)))
    return ClimateDataset(np.stack([s[0] for s in samples]), [s[1] for s in samples], grid, seed)

# --------------------------- Binary container --------------------------------
# header: magic "DLSD", u32 version, u32 kind, u32 count, u32 seed; then per-kind records.

class Reader:
    def __init__(self, data: bytes, source: str):
        self.data, self.pos, self.source = data, 0, source

    def read(self, fmt: str) -> Tuple:
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError(f"{self.source}: truncated at byte {self.pos} (need {size} more)")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def tensor(self) -> np.ndarray:
        (rank,) = self.read("<I")
        shape = self.read(f"<{rank}I")
        count = int(np.prod(shape)) if rank else 1
        (raw,) = self.read(f"<{count * 4}s")
        return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{self.source}: {len(self.data) - self.pos} trailing bytes")


def pack_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    return struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape) + arr.astype("<f4").tobytes()


def write_container(path: PathLike, kind: int, count: int, seed: int, body: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC + struct.pack("<IIII", VERSION, kind, count, int(seed) & 0xFFFFFFFF))
        fh.write(body)


def read_container(path: PathLike, kind: int) -> Tuple[int, int, Reader]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ValidationError(f"cannot read {path}: {e.strerror or e}") from e
    r = Reader(data, str(path))
    (magic,) = r.read("<4s")
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version, got_kind, count, seed = r.read("<IIII")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    if got_kind != kind:
        raise FormatError(f"{path}: container kind {got_kind}, expected {kind}")
    return count, seed, r


def save_dataset(dataset: Dataset, path: PathLike) -> None:
    if len(dataset) == 0:
        raise ValidationError("refusing to save an empty dataset")
    parts: List[bytes] = []
    if isinstance(dataset, HepDataset):
        for img, label, feats in zip(dataset.images, dataset.labels, dataset.features):
            parts += [pack_tensor(img), struct.pack("<I3d", int(label), *feats)]
    else:
        parts.append(struct.pack("<I", dataset.grid))
        for img, boxes in zip(dataset.images, dataset.boxes):
            parts += [pack_tensor(img), struct.pack("<I", len(boxes))]
            for b in boxes:
                parts.append(struct.pack("<3I5d", b.cell_i, b.cell_j, b.class_id,
                                         b.confidence, b.x, b.y, b.w, b.h))
    write_container(path, dataset.kind, len(dataset), dataset.seed, b"".join(parts))
    log.debug("saved %d samples to %s", len(dataset), path)


def _peek_kind(path: Path) -> int:
    try:
        with path.open("rb") as fh:
            head = fh.read(12)
    except OSError as e:
        raise ValidationError(f"cannot read {path}: {e.strerror or e}") from e
    if len(head) < 12 or head[:4] != MAGIC:
        raise FormatError(f"{path}: not a DLSD container")
    return struct.unpack("<I", head[8:12])[0]


def load_dataset(path: PathLike) -> Dataset:
    path = Path(path)
    kind = _peek_kind(path)
    if kind not in (HEP_KIND, CLIMATE_KIND):
        raise FormatError(f"{path}: container kind {kind} is not a dataset")
    count, seed, r = read_container(path, kind)
    if count == 0:
        raise ValidationError(f"{path}: dataset holds no samples")
    if kind == HEP_KIND:
        images, labels, feats = [], [], []
        for _ in range(count):
            images.append(r.tensor())
            label, *f = r.read("<I3d")
            labels.append(label)
            feats.append(f)
        r.finish()
        return HepDataset(np.stack(images), np.array(labels, dtype=np.int64), np.array(feats), seed)
    (grid,) = r.read("<I")
    images, boxes = [], []
    for _ in range(count):
        images.append(r.tensor())
        (nb,) = r.read("<I")
        sample = []
        for _ in range(nb):
            i, j, c, conf, x, y, w, h = r.read("<3I5d")
            sample.append(BoxTarget(i, j, conf, c, x, y, w, h))
        boxes.append(sample)
    r.finish()
    return ClimateDataset(np.stack(images), boxes, grid, seed)
