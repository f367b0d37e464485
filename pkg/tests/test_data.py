import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from sdm.data import (
    DataError,
    ImageKind,
    MaskGenerationError,
    MaskSpec,
    SyntheticSpec,
    checkerboard,
    from_bytes,
    gen_image,
    gen_mask,
    load_dataset,
    read_image,
    read_mask,
    synth_arrays,
    to_bytes,
    write_dataset,
    write_image,
    write_mask,
)
from sdm.numerics import make_rng


def test_checkerboard_period_8_flips():
    board = checkerboard(32, 32, 8)
    row = np.sign(board[0])
    col = np.sign(board[:, 0])
    for line in (row, col):
        flips = np.flatnonzero(np.diff(line)) + 1
        assert list(flips) == [8, 16, 24]


@pytest.mark.parametrize("kind", list(ImageKind))
@pytest.mark.parametrize("channels", [1, 3])
def test_images_in_range_and_deterministic(kind, channels):
    for seed in range(5):
        spec = SyntheticSpec(kind, 16, 24, channels, seed)
        a, b = gen_image(spec), gen_image(spec)
        assert a.shape == (channels, 16, 24)
        assert a.min() >= -1 and a.max() <= 1
        assert np.array_equal(a, b)


def test_gradient_is_affine():
    img = gen_image(SyntheticSpec(ImageKind.LINEAR_GRADIENT, 16, 16, 1, 3))[0]
    assert np.allclose(np.diff(img, 2, axis=0), 0, atol=1e-12)
    assert np.allclose(np.diff(img, 2, axis=1), 0, atol=1e-12)


def test_checkerboard_images_have_valid_period():
    for seed in range(20):
        img = gen_image(SyntheticSpec(ImageKind.CHECKERBOARD, 64, 64, 1, seed))[0]
        runs = np.diff(np.flatnonzero(np.diff(np.sign(img[0]))))
        assert len(runs) and runs.min() == runs.max() and 4 <= runs[0] <= 16


def test_full_frame_rect_gives_all_hole():
    spec = MaskSpec(rect_count=(1, 1), rect_size=(1.0, 1.0), stroke_count=(0, 0), hole_ratio=(0.0, 1.0))
    assert not np.any(gen_mask(spec, 8, 8, make_rng(0)))


def test_no_shapes_rejected_by_ratio():
    spec = MaskSpec(rect_count=(0, 0), stroke_count=(0, 0))
    with pytest.raises(MaskGenerationError, match="hole_ratio"):
        gen_mask(spec, 8, 8, make_rng(0))


def test_masks_binary_deterministic_and_connected_pieces():
    spec = MaskSpec()
    a = gen_mask(spec, 32, 32, make_rng(5, "m"))
    b = gen_mask(spec, 32, 32, make_rng(5, "m"))
    assert np.array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 1.0}


def test_single_stroke_is_4_connected():
    spec = MaskSpec(rect_count=(0, 0), stroke_count=(1, 1), hole_ratio=(0.0, 1.0))
    for seed in range(30):
        hole = gen_mask(spec, 32, 32, make_rng(seed)) == 0
        _, n = ndimage.label(hole)  # default structure is 4-connectivity
        assert n == 1


def test_hole_ratio_monte_carlo():
    spec = MaskSpec()
    rng = make_rng(11, "mc")
    ratios = np.array([1.0 - gen_mask(spec, 32, 32, rng).mean() for _ in range(10_000)])
    assert ratios.min() >= spec.hole_ratio[0] and ratios.max() <= spec.hole_ratio[1]


@given(st.integers(0, 2**31))
def test_roundtrip_quantization(seed):
    img = np.random.default_rng(seed).uniform(-1, 1, (1, 5, 7))
    assert np.abs(from_bytes(to_bytes(img)) - img).max() <= 1 / 255


def test_write_read_pgm_ppm(tmp_path, rng):
    gray = rng.uniform(-1, 1, (1, 6, 5))
    write_image(gray, tmp_path / "a.pgm")
    assert np.abs(read_image(tmp_path / "a.pgm") - gray).max() <= 1 / 255
    rgb = rng.uniform(-1, 1, (3, 4, 9))
    write_image(rgb, tmp_path / "a.ppm")
    back = read_image(tmp_path / "a.ppm")
    assert back.shape == (3, 4, 9) and np.abs(back - rgb).max() <= 1 / 255
    with pytest.raises(DataError):
        write_image(rgb, tmp_path / "b.pgm")


def test_endpoint_byte_mapping(tmp_path):
    (tmp_path / "e.pgm").write_bytes(b"P5\n2 1\n255\n\x00\xff")
    img = read_image(tmp_path / "e.pgm")
    assert img[0, 0, 0] == -1.0 and img[0, 0, 1] == 1.0
    assert list(to_bytes(np.array([-1.0, 1.0]))) == [0, 255]


def test_header_comments_accepted(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x80\x80")
    assert read_image(tmp_path / "c.pgm").shape == (1, 1, 2)


@pytest.mark.parametrize("blob,msg", [
    (b"P5\n4 4\n255\n\x00\x00", "truncated"),
    (b"P2\n1 1\n255\n0", "unsupported format"),
    (b"P5\n1 1\n65535\n\x00\x00", "bit depth"),
    (b"P5\nx 1\n255\n\x00", "malformed"),
    (b"P5\n1", "malformed"),
])
def test_bad_files_rejected(tmp_path, blob, msg):
    (tmp_path / "bad.pgm").write_bytes(blob)
    with pytest.raises(DataError, match=msg):
        read_image(tmp_path / "bad.pgm")


def test_mask_io(tmp_path):
    m = (np.arange(12).reshape(3, 4) % 3 == 0).astype(float)
    write_mask(m, tmp_path / "m.pgm")
    assert np.array_equal(read_mask(tmp_path / "m.pgm"), m)


def test_dataset_layout_and_twin(tmp_path):
    kinds = [ImageKind.LINEAR_GRADIENT, ImageKind.CHECKERBOARD]
    rows = write_dataset(tmp_path, kinds, 6, (16, 16), 1, MaskSpec(), seed=3)
    assert (tmp_path / "images" / "00005.pgm").exists() and (tmp_path / "masks" / "00000.pgm").exists()
    header = (tmp_path / "manifest.csv").read_text().splitlines()[0]
    assert header == "index,seed,kind,hole_ratio"
    assert [r["kind"] for r in rows] == ["linear-gradient", "checkerboard"] * 3
    images, masks, manifest = load_dataset(tmp_path)
    assert images.shape == (6, 1, 16, 16) and masks.shape == (6, 1, 16, 16) and len(manifest) == 6
    ti, tm = synth_arrays(kinds, 6, (16, 16), 1, MaskSpec(), seed=3)
    assert np.array_equal(ti, images) and np.array_equal(tm, masks)
    for r, m in zip(manifest, masks):
        assert float(r["hole_ratio"]) == pytest.approx(1 - m.mean(), abs=1e-6)


def test_empty_dataset(tmp_path):
    write_dataset(tmp_path, [ImageKind.CHECKERBOARD], 0, (8, 8), 1, MaskSpec(), 0)
    images, masks, rows = load_dataset(tmp_path)
    assert images.shape[0] == 0 and rows == []
