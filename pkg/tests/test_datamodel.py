import csv

import numpy as np
import pytest
from PIL import Image

from defectsynth.datamodel import (
    CATEGORIES,
    DatasetError,
    SampleRecord,
    ToyDefectSpec,
    check_patch,
    crop_normal_patches,
    denormalize,
    label_vector,
    load_image,
    load_manifest,
    make_toy_dataset,
    normalize,
    one_hot,
    write_index,
)


def _write_png(path, size=8, value=100):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full((size, size, 3), value, np.uint8)).save(path)


def _index(root, rows):
    with open(root / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["relative_path", "labels"])
        w.writerows(rows)


def test_label_order():
    assert CATEGORIES == ("crack", "spallation", "efflorescence", "exposed bars", "corrosion", "normal")
    np.testing.assert_array_equal(label_vector("crack,corrosion"), [1, 0, 0, 0, 1, 0])
    np.testing.assert_array_equal(label_vector("crack|exposed bars"), [1, 0, 0, 1, 0, 0])
    np.testing.assert_array_equal(label_vector(["Exposed_Bars"]), [0, 0, 0, 1, 0, 0])


@pytest.mark.parametrize("bad", ["", "normal|crack", "rust"])
def test_invalid_labels(bad):
    with pytest.raises(DatasetError):
        label_vector(bad)


def test_record_source_enum(tmp_path):
    with pytest.raises(DatasetError):
        SampleRecord(tmp_path / "x.png", one_hot("crack"), "fake")


def test_load_manifest_two_rows(tmp_path):
    _write_png(tmp_path / "img" / "a.png")
    _write_png(tmp_path / "img" / "b.png")
    _index(tmp_path, [["img/a.png", "crack"], ["img/b.png", "normal"]])
    m = load_manifest(tmp_path, "train")
    assert len(m) == 2 and m.skipped == 0
    assert [r.path.name for r in m] == ["a.png", "b.png"]
    assert len(m.normals()) == 1 and len(m.defects()) == 1


def test_load_manifest_skips_malformed(tmp_path):
    _write_png(tmp_path / "img" / "a.png")
    _index(tmp_path, [["img/a.png", "crack|corrosion"], ["img/missing.png", "crack"]])
    with pytest.warns(UserWarning, match="skipped 1"):
        m = load_manifest(tmp_path)
    assert len(m) == 1 and m.skipped == 1
    np.testing.assert_array_equal(m.records[0].label, [1, 0, 0, 0, 1, 0])


def test_load_manifest_missing_root(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "nope")


def test_load_manifest_order_stable(toy_root):
    a = [r.path for r in load_manifest(toy_root, "train")]
    b = [r.path for r in load_manifest(toy_root, "train")]
    assert a == b and len(a) > 0


def test_write_index_roundtrip(tmp_path):
    _write_png(tmp_path / "a.png")
    rec = SampleRecord(tmp_path / "a.png", label_vector("spallation|corrosion"), "synthetic")
    write_index(tmp_path, [rec])
    m = load_manifest(tmp_path)
    assert m.records[0].source == "synthetic"
    np.testing.assert_array_equal(m.records[0].label, rec.label)


def test_normalize_endpoints():
    assert normalize(np.array([0]))[0] == -1.0
    assert normalize(np.array([255]))[0] == 1.0
    assert normalize(np.array([127.5]))[0] == 0.0


def test_normalize_roundtrip_exhaustive():
    # every 8-bit value survives the round trip
    raw = np.arange(256, dtype=np.uint8)
    back = denormalize(normalize(raw))
    assert np.max(np.abs(back.astype(int) - raw)) * (1 / 255) <= 1 / 255
    np.testing.assert_array_equal(back, raw)


def test_random_image_roundtrip(rng):
    raw = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    assert np.abs(denormalize(normalize(raw)).astype(int) - raw).max() / 255 <= 1 / 255


def test_check_patch_rejects_out_of_range():
    with pytest.raises(DatasetError):
        check_patch(np.full((4, 4, 3), 1.5, np.float32))
    with pytest.raises(DatasetError):
        check_patch(np.zeros((4, 4, 3), np.float32), size=8)


def test_crop_shapes_and_determinism(rng):
    img = rng.uniform(-1, 1, (256, 256, 3)).astype(np.float32)
    a = crop_normal_patches(img, 128, 4, seed=5)
    b = crop_normal_patches(img, 128, 4, seed=5)
    assert len(a) == 4 and all(p.shape == (128, 128, 3) for p in a)
    for p, q in zip(a, b):
        np.testing.assert_array_equal(p, q)


def test_crop_too_small():
    with pytest.raises(DatasetError, match="slab.png"):
        crop_normal_patches(np.zeros((100, 100, 3)), 128, 1, 0, name="slab.png")


def test_toy_counts_and_layout(tmp_path):
    m = make_toy_dataset(ToyDefectSpec(samples_per_class=5, seed=7), tmp_path)
    assert len(m) == 30
    assert (tmp_path / "images" / "crack" / "7_0.png").is_file()
    assert (tmp_path / "masks" / "exposed_bars" / "7_4.png").is_file()
    splits = {s: len(load_manifest(tmp_path, s)) for s in ("train", "val", "test")}
    assert sum(splits.values()) == 30
    patch = load_image(m.records[0].path, 32)
    check_patch(patch, 32)


def test_toy_byte_identical(tmp_path):
    spec = ToyDefectSpec(samples_per_class=2, seed=11)
    make_toy_dataset(spec, tmp_path / "a")
    make_toy_dataset(spec, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a" / "images").rglob("*.png"))
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_toy_disjoint_seeds_differ(tmp_path):
    a = make_toy_dataset(ToyDefectSpec(samples_per_class=1, seed=1), tmp_path / "a")
    b = make_toy_dataset(ToyDefectSpec(samples_per_class=1, seed=2), tmp_path / "b")
    for ra, rb in zip(a, b):
        assert np.any(load_image(ra.path) != load_image(rb.path))


def test_toy_clamps_oversized_crack(tmp_path):
    spec = ToyDefectSpec(image_size=16, samples_per_class=3, crack_width=40, seed=0)
    with pytest.warns(UserWarning, match="clamped"):
        make_toy_dataset(spec, tmp_path)
    for mask_path in (tmp_path / "masks" / "crack").glob("*.png"):
        mask = np.asarray(Image.open(mask_path)) > 0
        assert mask.shape == (16, 16)
        # marks stay inside the canvas and do not flood it
        assert 0 < mask.sum() < mask.size // 2


def test_toy_spec_validation(tmp_path):
    with pytest.raises(DatasetError):
        make_toy_dataset(ToyDefectSpec(image_size=8), tmp_path)
    with pytest.raises(DatasetError):
        make_toy_dataset(ToyDefectSpec(samples_per_class=0), tmp_path)
