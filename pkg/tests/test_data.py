"""Dataset layer: palette codec, disk io, augmentation, folds, synthesis."""

import numpy as np
import pytest

from coalseg.data import (
    AugmentConfig,
    CLASS_NAMES,
    DataError,
    IGNORE_INDEX,
    NUM_CLASSES,
    PALETTE,
    SampleRecord,
    augment,
    expand_records,
    five_fold_split,
    indices_to_rgb,
    load_dataset,
    resize_bilinear,
    resize_nearest,
    rgb_to_indices,
    save_dataset,
    synth_generate,
)


def block_mask(h, w, block=8):
    yy, xx = np.mgrid[0:h, 0:w]
    return (((yy // block) * 2 + (xx // block)) % NUM_CLASSES).astype(np.uint8)


# -- palette -----------------------------------------------------------------


def test_palette_round_trip_with_ignore():
    rng = np.random.default_rng(0)
    mask = rng.integers(0, NUM_CLASSES, size=(13, 17)).astype(np.uint8)
    mask[0, :] = IGNORE_INDEX
    assert np.array_equal(rgb_to_indices(indices_to_rgb(mask)), mask)


def test_unknown_color_rejected():
    rgb = np.zeros((4, 4, 3), dtype=np.uint8)
    rgb[..., 0] = 7  # not in the palette
    with pytest.raises(DataError, match="unmapped mask color"):
        rgb_to_indices(rgb)


def test_palette_has_five_distinct_classes():
    assert len(CLASS_NAMES) == NUM_CLASSES == 5
    assert len({PALETTE[i] for i in range(NUM_CLASSES)}) == 5


# -- records and disk io -----------------------------------------------------


def test_record_rejects_bad_class_index():
    img = np.zeros((4, 4, 3))
    bad = np.full((4, 4), 7, dtype=np.uint8)
    with pytest.raises(DataError, match="class index 7"):
        SampleRecord(id="x", image=img, mask=bad)


def test_record_rejects_shape_mismatch():
    with pytest.raises(DataError, match="mask shape"):
        SampleRecord(id="x", image=np.zeros((4, 4, 3)), mask=np.zeros((4, 5), dtype=np.uint8))


def test_save_load_round_trip(tmp_path):
    records = synth_generate(3, seed=5, size=32)
    save_dataset(records, str(tmp_path))
    assert (tmp_path / "palette.json").exists()
    loaded = load_dataset(str(tmp_path))
    assert [r.id for r in loaded] == [r.id for r in records]
    for a, b in zip(records, loaded):
        assert np.array_equal(a.mask, b.mask)
        assert np.max(np.abs(a.image - b.image)) <= 1.0 / 255.0 + 1e-12


def test_load_reports_per_file_errors(tmp_path):
    records = synth_generate(3, seed=9, size=16)
    save_dataset(records, str(tmp_path))
    # break one mask color, delete another mask entirely
    from PIL import Image

    bad = np.zeros((16, 16, 3), dtype=np.uint8)
    Image.fromarray(bad).save(tmp_path / "masks" / "synth-0000.png")
    (tmp_path / "masks" / "synth-0001.png").unlink()
    errors = []
    loaded = load_dataset(str(tmp_path), errors=errors)
    assert [r.id for r in loaded] == ["synth-0002"]
    assert sorted(e[0] for e in errors) == ["synth-0000.png", "synth-0001.png"]


def test_missing_root_raises(tmp_path):
    with pytest.raises(DataError, match="no images"):
        load_dataset(str(tmp_path / "nope"))


# -- resizes -----------------------------------------------------------------


def test_bilinear_resize_worked_example():
    img = np.array([[0.0, 2.0]])
    out = resize_bilinear(img, 1, 4)
    assert np.allclose(out, [[0.0, 0.5, 1.5, 2.0]])


def test_bilinear_resize_keeps_constant_regions_exact():
    img = np.full((6, 6, 3), 0.37)
    assert np.allclose(resize_bilinear(img, 5, 7), 0.37, atol=1e-15)


def test_nearest_resize_down_and_up():
    mask = np.array([[0, 1, 2, 3]], dtype=np.uint8)
    assert np.array_equal(resize_nearest(mask, 1, 2), [[1, 3]])
    mask2 = np.array([[0, 1]], dtype=np.uint8)
    assert np.array_equal(resize_nearest(mask2, 1, 4), [[0, 0, 1, 1]])


# -- augmentation ------------------------------------------------------------


def test_augment_deterministic_and_seed_sensitive():
    rec = synth_generate(1, seed=3, size=48)[0]
    cfg = AugmentConfig(crop=32)
    a = augment(rec, seed=11, cfg=cfg)
    b = augment(rec, seed=11, cfg=cfg)
    c = augment(rec, seed=12, cfg=cfg)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)
    assert not (np.array_equal(a.image, c.image) and np.array_equal(a.mask, c.mask))


def test_augment_output_size_fixed():
    cfg = AugmentConfig(crop=32)
    for size in (16, 32, 33, 80):
        rec = synth_generate(1, seed=size, size=size)[0]
        for seed in range(8):
            out = augment(rec, seed=seed, cfg=cfg)
            assert out.image.shape == (32, 32, 3)
            assert out.mask.shape == (32, 32)


def test_augment_photometric_leaves_mask_alone():
    rec = synth_generate(1, seed=1, size=32)[0]
    cfg = AugmentConfig(crop=32, contrast=(1.7, 1.7), brightness=(0.5, 0.5),
                        scale=(1.0, 1.0), flip=False)
    out = augment(rec, seed=0, cfg=cfg)
    assert np.array_equal(out.mask, rec.mask)
    assert not np.array_equal(out.image, rec.image)


def test_augment_geometry_keeps_image_and_mask_aligned():
    """Coordinate-ramp images decode each output pixel's source position
    (bilinear interpolation of a linear ramp is exact), so the augmented
    mask must equal the original mask at the nearest-rounded position.
    Rounding ties accept either neighbor. Checked across 1000 seeds."""
    h = w = 64
    mask = block_mask(h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    image = np.stack([yy / h, xx / w, np.full((h, w), 0.5)], axis=-1)
    rec = SampleRecord(id="ramp", image=image, mask=mask)
    cfg = AugmentConfig(crop=32, contrast=(1.0, 1.0), brightness=(1.0, 1.0))

    def candidates(pos, limit):
        shifted = pos + 0.5
        lo = np.floor(shifted).astype(int)
        tie = np.abs(shifted - lo) < 1e-9
        return np.clip(lo, 0, limit - 1), np.clip(np.where(tie, lo - 1, lo), 0, limit - 1)

    for seed in range(1000):
        out = augment(rec, seed=seed, cfg=cfg)
        ya, yb = candidates(out.image[:, :, 0] * h, h)
        xa, xb = candidates(out.image[:, :, 1] * w, w)
        ok = np.zeros(out.mask.shape, dtype=bool)
        for cy in (ya, yb):
            for cx in (xa, xb):
                ok |= out.mask == mask[cy, cx]
        assert ok.all(), f"seed {seed}: mask diverged from image geometry at {np.argwhere(~ok)[0]}"


def test_augment_flip_only_is_exact_flip():
    rec = synth_generate(1, seed=2, size=32)[0]
    cfg = AugmentConfig(crop=32, contrast=(1.0, 1.0), brightness=(1.0, 1.0),
                        scale=(1.0, 1.0), flip=True)
    seen = set()
    for seed in range(64):
        out = augment(rec, seed=seed, cfg=cfg)
        for fh in (False, True):
            for fv in (False, True):
                img = rec.image[:, ::-1] if fh else rec.image
                img = img[::-1] if fv else img
                if np.array_equal(out.image, img):
                    seen.add((fh, fv))
    assert seen == {(False, False), (False, True), (True, False), (True, True)}


def test_augment_config_validation():
    with pytest.raises(DataError, match="crop"):
        AugmentConfig(crop=0)
    with pytest.raises(DataError, match="contrast"):
        AugmentConfig(contrast=(1.2, 0.8))
    with pytest.raises(DataError, match="scale"):
        AugmentConfig(scale=(0.0, 1.0))
    with pytest.raises(DataError, match="expansion"):
        AugmentConfig(expansion=0)


def test_expand_records_counts_and_determinism():
    recs = synth_generate(2, seed=0, size=16)
    cfg = AugmentConfig(crop=16, expansion=3)
    a = expand_records(recs, cfg, seed=7)
    b = expand_records(recs, cfg, seed=7)
    assert len(a) == 6
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a, b))
    assert len({r.id for r in a}) == 6


# -- folds -------------------------------------------------------------------


def test_five_fold_sizes_and_coverage():
    for n in (5, 10, 79, 100):
        folds = five_fold_split(n, seed=42)
        sizes = sorted(len(f) for f in folds)
        assert max(sizes) - min(sizes) <= 1
        assert sum(sizes) == n
        merged = np.concatenate(folds)
        assert len(np.unique(merged)) == n  # disjoint and complete


def test_five_fold_79_is_16x4_plus_15():
    sizes = sorted((len(f) for f in five_fold_split(79, seed=0)), reverse=True)
    assert sizes == [16, 16, 16, 16, 15]


def test_five_fold_seeded():
    a = five_fold_split(79, seed=1)
    b = five_fold_split(79, seed=1)
    c = five_fold_split(79, seed=2)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert any(not np.array_equal(x, y) for x, y in zip(a, c))


def test_five_fold_too_small():
    with pytest.raises(DataError, match="at least 5"):
        five_fold_split(4, seed=0)


# -- synthesis ---------------------------------------------------------------


def test_synth_deterministic():
    a = synth_generate(4, seed=6, size=24)
    b = synth_generate(4, seed=6, size=24)
    for x, y in zip(a, b):
        assert x.id == y.id
        assert np.array_equal(x.image, y.image)
        assert np.array_equal(x.mask, y.mask)


def test_synth_every_scene_has_all_classes():
    for rec in synth_generate(20, seed=1, size=64):
        assert set(np.unique(rec.mask)) == set(range(NUM_CLASSES))


def test_synth_class_shares_balanced():
    records = synth_generate(100, seed=0, size=64)
    counts = np.zeros(NUM_CLASSES)
    for rec in records:
        counts += np.bincount(rec.mask.ravel(), minlength=NUM_CLASSES)
    shares = counts / counts.sum()
    assert shares.min() >= 0.05
    assert np.all(np.abs(shares - 0.2) < 0.1)


def test_synth_images_in_unit_range():
    rec = synth_generate(1, seed=0, size=32)[0]
    assert rec.image.min() >= 0.0 and rec.image.max() <= 1.0
    assert rec.image.shape == (32, 32, 3)
