# tests/test_datagen.py
from __future__ import annotations
import struct

import numpy as np
import pytest

from hybrid.datagen import (
    HEP_KIND, MAGIC, RUNLOG_KIND, ClimateDataset, HepDataset, gen_climate, gen_hep, hep_features,
    load_dataset, read_container, save_dataset, split_indices, write_container,
)
from hybrid.errors import FormatError, ValidationError
from hybrid.models import CYCLONE


@pytest.fixture(scope="module")
def hep():
    return gen_hep(seed=11, n=600, size=16)


@pytest.fixture(scope="module")
def climate():
    return gen_climate(seed=12, n=24, channels=6, size=32, grid=8)


def test_splits_partition_the_dataset():
    n = 5000
    parts = [split_indices(3, n, s) for s in ("train", "val", "test")]
    joined = np.sort(np.concatenate(parts))
    assert np.array_equal(joined, np.arange(n))
    assert 0.77 < parts[0].size / n < 0.83
    assert 0.08 < parts[1].size / n < 0.12
    assert np.array_equal(split_indices(3, n, "val"), parts[1])
    assert not np.array_equal(split_indices(4, n, "val"), parts[1])
    with pytest.raises(ValidationError):
        split_indices(3, n, "holdout")


def test_gen_hep_is_deterministic_and_thread_independent(hep):
    again = gen_hep(seed=11, n=600, size=16, threads=3)
    assert np.array_equal(hep.images, again.images)
    assert np.array_equal(hep.labels, again.labels)
    assert np.array_equal(hep.features, again.features)
    other = gen_hep(seed=12, n=600, size=16)
    assert not np.array_equal(hep.images, other.images)


def test_gen_hep_content(hep):
    assert hep.images.shape == (600, 3, 16, 16)
    assert 0.04 < hep.labels.mean() < 0.15
    assert np.all(hep.images >= 0)
    np.testing.assert_allclose(hep.features[0], hep_features(hep.images[0]))
    energy = hep.images[:, 0].sum(axis=(1, 2)) + hep.images[:, 1].sum(axis=(1, 2))
    ceiling = np.quantile(energy[hep.labels == 0], 0.9)
    assert np.mean(energy[hep.labels == 1] > ceiling) < 0.1


def test_gen_hep_rejects_bad_arguments():
    with pytest.raises(ValidationError):
        gen_hep(0, 0)
    with pytest.raises(ValidationError):
        gen_hep(0, 10, signal_fraction=1.0)
    with pytest.raises(ValidationError):
        gen_hep(0, 10, size=8)


def test_gen_climate_boxes(climate):
    assert climate.images.shape == (24, 6, 32, 32)
    total = 0
    for boxes in climate.boxes:
        cells = [(b.cell_i, b.cell_j) for b in boxes]
        assert len(cells) == len(set(cells)) <= 3
        for b in boxes:
            assert 0 <= b.cell_i < 8 and 0 <= b.cell_j < 8
            assert 0.0 <= b.x <= 1.0 and 0.0 <= b.y <= 1.0 and b.w > 0 and b.h > 0
        total += len(boxes)
    assert total > 0
    assert any(b.class_id == CYCLONE for s in climate.boxes for b in s)
    assert np.array_equal(climate.images, gen_climate(12, 24, 6, 32, 8, threads=4).images)


def test_hep_round_trip(tmp_path, hep):
    path = tmp_path / "hep.dlsd"
    save_dataset(hep, path)
    back = load_dataset(path)
    assert isinstance(back, HepDataset)
    assert np.array_equal(back.images, hep.images)
    assert np.array_equal(back.labels, hep.labels)
    assert np.array_equal(back.features, hep.features)
    assert back.seed == hep.seed


def test_climate_round_trip(tmp_path, climate):
    path = tmp_path / "climate.dlsd"
    save_dataset(climate, path)
    back = load_dataset(path)
    assert isinstance(back, ClimateDataset)
    assert np.array_equal(back.images, climate.images)
    assert back.boxes == climate.boxes
    assert back.grid == 8


def test_container_corruption_is_detected(tmp_path, hep):
    path = tmp_path / "hep.dlsd"
    save_dataset(hep, path)
    data = path.read_bytes()
    (tmp_path / "short.dlsd").write_bytes(data[:-5])
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "short.dlsd")
    (tmp_path / "long.dlsd").write_bytes(data + b"\0")
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "long.dlsd")
    (tmp_path / "magic.dlsd").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "magic.dlsd")
    with pytest.raises(FormatError):
        read_container(path, RUNLOG_KIND)


def test_container_header_layout(tmp_path):
    path = tmp_path / "empty.dlsd"
    write_container(path, HEP_KIND, 0, 42, b"")
    assert path.read_bytes() == MAGIC + struct.pack("<IIII", 1, HEP_KIND, 0, 42)
    with pytest.raises(ValidationError):
        load_dataset(path)


def test_hep_images_are_sparse():
    ds = gen_hep(seed=21, n=300, size=32)
    zero_share = (ds.images == 0).mean(axis=(1, 2, 3))
    assert zero_share.min() >= 0.8


def test_hep_signal_carries_more_energy_than_background():
    ds = gen_hep(seed=22, n=10_000, size=32, threads=4)
    energy = ds.features[:, 0]
    assert energy[ds.labels == 1].mean() > energy[ds.labels == 0].mean()
    # over-energetic signal is redrawn, never dropped
    assert len(ds) == 10_000 and 0.07 < ds.labels.mean() < 0.11


def test_vortex_stands_out_of_its_channel():
    ds = gen_climate(seed=23, n=120, channels=8, size=64, grid=8)
    checked = 0
    for img, boxes in zip(ds.images, ds.boxes):
        if len(boxes) != 1 or boxes[0].class_id != CYCLONE:
            continue
        b = boxes[0]
        r, c = int((b.y + b.h / 2) * 64), int((b.x + b.w / 2) * 64)
        ch = img[0]
        response = ch[r - 1:r + 2, c - 1:c + 2].mean() - ch.mean()
        assert response > 2.0 * ch.std()
        checked += 1
    assert checked >= 3


def test_climate_boxes_lie_inside_the_image(climate):
    ds = gen_climate(seed=24, n=60, channels=6, size=32, grid=8)
    for boxes in [*climate.boxes, *ds.boxes]:
        for b in boxes:
            assert b.x >= 0.0 and b.y >= 0.0
            assert b.x + b.w <= 1.0 + 1e-12 and b.y + b.h <= 1.0 + 1e-12
