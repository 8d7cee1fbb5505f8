import numpy as np
import pytest

from ramlab.data import (LOCATIONS, DatasetSpec, ImageFormatError, dataset_exists, generate_dataset,
                         make_patch_mask, palette, read_dataset, read_pgm, read_ppm, write_dataset,
                         write_pgm, write_ppm)
from ramlab.rng import RngState


def test_generation_is_deterministic():
    a = generate_dataset(DatasetSpec(6), 3)
    b = generate_dataset(DatasetSpec(6), 3)
    for (xa, ya), (xb, yb) in zip(a, b):
        assert xa.tobytes() == xb.tobytes() and ya.tobytes() == yb.tobytes()
    c = generate_dataset(DatasetSpec(6), 4)
    assert any(xa.tobytes() != xc.tobytes() for (xa, _), (xc, _) in zip(a, c))


def test_dataset_invariants():
    spec = DatasetSpec(40)
    for img, lab in generate_dataset(spec, 0):
        assert img.shape == (32, 32, 3) and lab.shape == (32, 32)
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert lab.min() >= 0 and lab.max() < spec.classes
        assert len(np.unique(lab)) >= 2


def test_pixels_follow_their_class_colour():
    # without tint and noise every pixel is exactly its class colour
    spec = DatasetSpec(10, noise=0.0, tint=0.0)
    pal = palette(spec.classes)
    for img, lab in generate_dataset(spec, 5):
        np.testing.assert_array_equal(img, pal[lab])


def test_tint_is_one_offset_per_image():
    spec = DatasetSpec(5, noise=0.0)
    pal = palette(spec.classes)
    for img, lab in generate_dataset(spec, 5):
        diff = img - pal[lab]
        inside = (img > 0) & (img < 1)  # unclipped entries
        for ch in range(3):
            vals = diff[..., ch][inside[..., ch]]
            if vals.size:
                assert np.ptp(vals) < 1e-12


def test_palette_background_darkest_and_distinct():
    pal = palette(8)
    assert len({tuple(c) for c in pal}) == 8
    assert pal[0].sum() == pal.sum(axis=1).min()
    assert len({tuple(c) for c in palette(12)}) == 12


def test_generation_errors():
    with pytest.raises(ValueError):
        generate_dataset(DatasetSpec(2, classes=2), 0)
    with pytest.raises(ValueError):
        generate_dataset(DatasetSpec(2, img_h=8, img_w=8), 0)
    with pytest.raises(ValueError):
        generate_dataset(DatasetSpec(2, img_h=30), 0)


def test_patch_mask_examples():
    m = make_patch_mask(32, 32, 8, "lower_right")
    assert m.mask[24:32, 24:32].all() and m.area == 64
    c = make_patch_mask(32, 32, 8, "center")
    assert c.mask[12:20, 12:20].all() and c.area == 64
    odd = make_patch_mask(9, 9, 4, "center")
    assert (odd.top, odd.left) == (2, 2)
    for loc in LOCATIONS:
        pm = make_patch_mask(32, 32, 8, loc, RngState(1))
        assert pm.area == 64
        rows, cols = np.nonzero(pm.mask)
        assert rows.max() - rows.min() == 7 and cols.max() - cols.min() == 7
    assert make_patch_mask(32, 32, 8, "top_left").mask[0, 0]
    assert make_patch_mask(32, 32, 8, "top_right").mask[0, 31]
    assert make_patch_mask(32, 32, 8, "lower_left").mask[31, 0]
    assert make_patch_mask(16, 20, (4, 6), "lower_right").area == 24


def test_random_mask_uses_rng():
    a = make_patch_mask(32, 32, 8, "random", RngState(1).child(0))
    b = make_patch_mask(32, 32, 8, "random", RngState(1).child(0))
    assert (a.top, a.left) == (b.top, b.left)
    tops = {make_patch_mask(32, 32, 8, "random", RngState(1).child(k)).top for k in range(40)}
    assert len(tops) > 5 and max(tops) <= 24
    with pytest.raises(ValueError):
        make_patch_mask(32, 32, 8, "random")


def test_patch_mask_errors():
    with pytest.raises(ValueError):
        make_patch_mask(8, 8, 9)
    with pytest.raises(ValueError):
        make_patch_mask(8, 8, 2, "middle")
    with pytest.raises(ValueError):
        make_patch_mask(8, 8, 0)


def test_ppm_round_trip(tmp_path, rs):
    img = rs.uniform(size=(5, 7, 3))
    write_ppm(tmp_path / "a.ppm", img)
    back = read_ppm(tmp_path / "a.ppm")
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 1 / 255


def test_ppm_zero_image_payload(tmp_path):
    write_ppm(tmp_path / "z.ppm", np.zeros((2, 3, 3)))
    raw = (tmp_path / "z.ppm").read_bytes()
    assert raw == b"P6\n3 2\n255\n" + bytes(18)


def test_pgm_verbatim(tmp_path):
    lab = np.arange(12).reshape(3, 4) * 20
    write_pgm(tmp_path / "l.pgm", lab)
    assert (tmp_path / "l.pgm").read_bytes().endswith(bytes(lab.ravel().astype(np.uint8)))
    np.testing.assert_array_equal(read_pgm(tmp_path / "l.pgm"), lab)
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "bad.pgm", np.array([[256]]))


def test_malformed_files(tmp_path):
    (tmp_path / "h.ppm").write_bytes(b"P3\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(ImageFormatError):
        read_ppm(tmp_path / "h.ppm")
    (tmp_path / "t.ppm").write_bytes(b"P6\n2 2\n255\n\x00\x00\x00")
    with pytest.raises(ImageFormatError, match="truncated"):
        read_ppm(tmp_path / "t.ppm")
    (tmp_path / "m.pgm").write_bytes(b"P5\n2 x\n255\n\x00\x00")
    with pytest.raises(ImageFormatError):
        read_pgm(tmp_path / "m.pgm")
    (tmp_path / "d.pgm").write_bytes(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(ImageFormatError):
        read_pgm(tmp_path / "d.pgm")


def test_header_comments_are_skipped(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x03\x07")
    np.testing.assert_array_equal(read_pgm(tmp_path / "c.pgm"), [[3, 7]])


def test_dataset_on_disk(tmp_path):
    samples = generate_dataset(DatasetSpec(4), 1)
    manifest = write_dataset(tmp_path / "ds", samples)
    lines = manifest.read_text().splitlines()
    assert len(lines) == 4
    assert lines[0].split("\t") == ["0", "images/00000.ppm", "labels/00000.pgm"]
    assert dataset_exists(tmp_path / "ds") and not dataset_exists(tmp_path / "nope")
    back = read_dataset(tmp_path / "ds")
    for (x, y), (xb, yb) in zip(samples, back):
        np.testing.assert_array_equal(y, yb)
        assert np.abs(x - xb).max() <= 1 / 255
