"""Phantom generation and annotation corruption."""

import csv
import os

import numpy as np
import pytest

from segkit.synth import (
    FG_FRACTION_RANGE,
    degrade_labels,
    extract_scribbles,
    gen_synthetic_dataset,
)
from segkit.volio import load_volume


def _disk_label(size=48, radius=10, cls=1, center=None):
    cy, cx = center or (size // 2, size // 2)
    yy, xx = np.mgrid[:size, :size]
    lab = np.zeros((size, size), dtype=np.int64)
    lab[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2] = cls
    return lab


def _dice(a, b):
    a, b = a > 0, b > 0
    denom = a.sum() + b.sum()
    return 1.0 if denom == 0 else 2.0 * (a & b).sum() / denom


def _read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


# ---------------------------------------------------------------------------
# dataset generation


def test_gen_dataset_split_sizes_and_layout(tmp_path):
    paths = gen_synthetic_dataset(20, 24, 3, seed=1, out_dir=str(tmp_path))
    rows = {split: _read_csv(p) for split, p in paths.items()}
    for split in ("train", "valid", "test"):
        assert rows[split][0] == ["image", "label"]
    assert len(rows["train"]) - 1 == 14
    assert len(rows["valid"]) - 1 == 2
    assert len(rows["test"]) - 1 == 4
    all_images = [r[0] for split in rows for r in rows[split][1:]]
    assert len(all_images) == 20
    assert len(set(all_images)) == 20  # disjoint splits
    for rel in all_images[:3]:
        assert os.path.isfile(tmp_path / rel)


def test_gen_dataset_cases_are_valid(tmp_path):
    gen_synthetic_dataset(6, 24, 3, seed=2, out_dir=str(tmp_path))
    for i in range(6):
        img = load_volume(str(tmp_path / "images" / f"case_{i:04d}.png"))
        lab = load_volume(str(tmp_path / "labels" / f"case_{i:04d}.png"), is_label=True)
        assert img.data.shape == (1, 24, 24)
        assert lab.data.shape == (1, 24, 24)
        ids = np.unique(lab.data)
        assert ids.max() < 3 and ids.min() >= 0
        frac = float((lab.data > 0).mean())
        assert FG_FRACTION_RANGE[0] <= frac <= FG_FRACTION_RANGE[1]


def test_gen_dataset_deterministic(tmp_path):
    a = gen_synthetic_dataset(5, 16, 2, seed=9, out_dir=str(tmp_path / "a"))
    b = gen_synthetic_dataset(5, 16, 2, seed=9, out_dir=str(tmp_path / "b"))
    for split in a:
        assert _read_csv(a[split]) == _read_csv(b[split])
    for i in range(5):
        name = f"case_{i:04d}.png"
        for sub in ("images", "labels"):
            with open(tmp_path / "a" / sub / name, "rb") as f:
                bytes_a = f.read()
            with open(tmp_path / "b" / sub / name, "rb") as f:
                bytes_b = f.read()
            assert bytes_a == bytes_b, f"{sub}/{name}"


def test_gen_dataset_3d_writes_volumes(tmp_path):
    gen_synthetic_dataset(2, (12, 12, 12), 2, seed=3, out_dir=str(tmp_path))
    vol = load_volume(str(tmp_path / "images" / "case_0000.nii.gz"))
    assert vol.data.shape == (1, 12, 12, 12)


def test_gen_dataset_validation():
    with pytest.raises(ValueError, match="foreground"):
        gen_synthetic_dataset(2, 16, 1, seed=0, out_dir="/tmp/unused")
    with pytest.raises(ValueError, match="size"):
        gen_synthetic_dataset(2, (16,), 2, seed=0, out_dir="/tmp/unused")


# ---------------------------------------------------------------------------
# label degradation


def test_degrade_magnitude_zero_is_identity():
    lab = _disk_label()
    for mode in ("dilate", "erode", "edge_distort"):
        out = degrade_labels(lab, mode, 0)
        np.testing.assert_array_equal(out, lab)
        assert out is not lab


def test_degrade_dilate_superset_erode_subset():
    lab = _disk_label(radius=8)
    fg = lab > 0
    dil = degrade_labels(lab, "dilate", 2) > 0
    ero = degrade_labels(lab, "erode", 2) > 0
    assert (dil & fg).sum() == fg.sum()      # dilation covers the original
    assert (ero & ~fg).sum() == 0            # erosion stays inside
    assert dil.sum() > fg.sum() > ero.sum()


def test_degrade_dice_decays_with_magnitude():
    lab = _disk_label(size=64, radius=12)
    for mode in ("dilate", "erode", "edge_distort"):
        dices = [_dice(lab, degrade_labels(lab, mode, m, seed=4)) for m in (0, 1, 3, 5)]
        assert dices[0] == 1.0
        assert all(b <= a + 1e-9 for a, b in zip(dices, dices[1:])), (mode, dices)
        assert dices[-1] < 0.97, (mode, dices)


def test_degrade_erosion_may_empty_small_objects():
    lab = _disk_label(size=16, radius=1)
    out = degrade_labels(lab, "erode", 3)
    assert (out > 0).sum() == 0  # allowed: the object vanishes


def test_degrade_edge_distort_keeps_id_set_and_seed():
    lab = _disk_label(size=48, radius=10, cls=2)
    a = degrade_labels(lab, "edge_distort", 3.0, seed=5)
    b = degrade_labels(lab, "edge_distort", 3.0, seed=5)
    c = degrade_labels(lab, "edge_distort", 3.0, seed=6)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert set(np.unique(a)) <= set(np.unique(lab))


def test_degrade_validation():
    lab = _disk_label()
    with pytest.raises(ValueError, match="mode"):
        degrade_labels(lab, "blur", 1)
    with pytest.raises(ValueError, match="integer"):
        degrade_labels(lab.astype(np.float32), "dilate", 1)
    with pytest.raises(ValueError, match="magnitude"):
        degrade_labels(lab, "erode", -1)


# ---------------------------------------------------------------------------
# scribble extraction


def _two_class_label():
    lab = _disk_label(size=64, radius=12, cls=1, center=(30, 28))
    lab[(np.mgrid[:64, :64][0] - 14) ** 2 + (np.mgrid[:64, :64][1] - 50) ** 2 <= 25] = 2
    return lab


def test_scribbles_subset_of_dense_labels():
    lab = _two_class_label()
    scr = extract_scribbles(lab, seed=0)
    ann = scr != 3
    assert ann.any()
    np.testing.assert_array_equal(scr[ann], lab[ann])
    # sparse: a scribble is a thin walk, not a region
    assert ann.mean() < 0.10
    # every class keeps at least one annotated pixel
    assert set(np.unique(scr[ann])) == {0, 1, 2}


def test_scribbles_deterministic_and_seed_sensitive():
    lab = _two_class_label()
    a = extract_scribbles(lab, seed=1)
    b = extract_scribbles(lab, seed=1)
    c = extract_scribbles(lab, seed=2)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_scribbles_ignore_value():
    lab = _disk_label(size=32, radius=6)
    scr = extract_scribbles(lab, seed=0)
    assert scr.max() == 2  # default: max id + 1
    scr = extract_scribbles(lab, seed=0, ignore_value=255)
    assert (scr == 255).any()
    assert set(np.unique(scr)) <= {0, 1, 255}


def test_scribbles_tiny_class_keeps_one_pixel():
    lab = _disk_label(size=32, radius=6)
    lab[3, 3] = 2  # single-pixel class, nothing to skeletonize into a walk
    scr = extract_scribbles(lab, seed=0)
    assert (scr == 2).sum() >= 1


def test_scribbles_validation():
    with pytest.raises(ValueError, match="2D"):
        extract_scribbles(np.zeros((4, 4, 4), dtype=np.int64))
    with pytest.raises(ValueError, match="integer"):
        extract_scribbles(np.zeros((4, 4), dtype=np.float64))
