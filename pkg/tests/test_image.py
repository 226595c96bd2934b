import colorsys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_image, srgb8_image
from oracles import stats_oracle
from retouch.image import (
    HIST_BINS,
    CorruptImageError,
    ImageBuffer,
    ImageNotFoundError,
    UnsupportedFormatError,
    encode_ppm,
    hsl_to_rgb,
    image_stats,
    linear_to_srgb,
    load_image,
    quantize8,
    rgb_to_hsl,
    save_image,
    srgb_to_linear,
)

unit = st.floats(0.0, 1.0, allow_nan=False)


def ppm_bytes(w, h, payload):
    return f"P6\n{w} {h}\n255\n".encode() + bytes(payload)


# --- ImageBuffer ------------------------------------------------------------------


def test_buffer_is_read_only_copy():
    src = np.zeros((2, 3, 3))
    img = ImageBuffer(src)
    src[0, 0, 0] = 1.0
    assert img.data[0, 0, 0] == 0.0
    with pytest.raises(ValueError):
        img.data[0, 0, 0] = 1.0
    assert (img.width, img.height) == (3, 2)


@pytest.mark.parametrize(
    "data",
    [np.zeros((2, 2)), np.zeros((2, 2, 4)), np.zeros((0, 2, 3)), np.full((1, 1, 3), np.nan), np.full((1, 1, 3), np.inf)],
)
def test_buffer_rejects_bad_samples(data):
    with pytest.raises(ValueError):
        ImageBuffer(data)


def test_values_above_one_allowed_pre_clamp():
    img = ImageBuffer(np.full((1, 1, 3), 1.7))
    assert img.data.max() == 1.7
    assert img.clamped().max() == 1.0


# --- transfer functions -------------------------------------------------------------


def test_transfer_fixed_points():
    assert srgb_to_linear(0.0) == 0.0 and srgb_to_linear(1.0) == 1.0
    assert linear_to_srgb(0.0) == 0.0 and linear_to_srgb(1.0) == 1.0


def test_srgb_to_linear_half():
    # ((0.5 + 0.055) / 1.055) ** 2.4
    assert srgb_to_linear(0.5) == pytest.approx(0.21404114048223255, abs=1e-12)
    assert round(srgb_to_linear(0.5), 5) == 0.21404


def test_linear_segment():
    assert srgb_to_linear(0.04) == pytest.approx(0.04 / 12.92, abs=1e-15)
    assert linear_to_srgb(0.001) == pytest.approx(0.01292, abs=1e-15)


def test_transfer_clamps_inputs():
    assert srgb_to_linear(-0.3) == 0.0 and srgb_to_linear(1.4) == 1.0
    assert linear_to_srgb(2.0) == 1.0


@given(unit)
def test_transfer_round_trip(v):
    assert abs(linear_to_srgb(srgb_to_linear(v)) - v) <= 1e-9
    assert abs(srgb_to_linear(linear_to_srgb(v)) - v) <= 1e-9


def test_transfer_monotone_on_dense_grid():
    v = np.linspace(0.0, 1.0, 200001)
    assert np.all(np.diff(srgb_to_linear(v)) >= 0)
    assert np.all(np.diff(linear_to_srgb(v)) >= 0)
    knee = np.linspace(0.0031, 0.0032, 20001)
    assert np.all(np.diff(linear_to_srgb(knee)) >= 0)


def test_quantize_round_half_up():
    t = np.array([0.5 / 255, 1.5 / 255, 254.5 / 255, 0.49 / 255, -0.1, 1.2])
    assert quantize8(t).tolist() == [1, 2, 255, 0, 0, 255]


# --- HSL ----------------------------------------------------------------------------


def test_hsl_examples():
    assert rgb_to_hsl((1.0, 0.0, 0.0)) == (0.0, 1.0, 0.5)
    assert rgb_to_hsl((0.5, 0.5, 0.5)) == (0.0, 0.0, 0.5)
    back = hsl_to_rgb(rgb_to_hsl((0.2, 0.4, 0.6)))
    assert np.allclose(back, (0.2, 0.4, 0.6), atol=1e-6)


@given(unit, unit, unit)
def test_hsl_matches_colorsys(r, g, b):
    h, s, l = rgb_to_hsl((r, g, b))
    hh, ll, ss = colorsys.rgb_to_hls(r, g, b)
    assert l == pytest.approx(ll, abs=1e-12)
    if max(r, g, b) - min(r, g, b) > 1e-9:
        assert s == pytest.approx(ss, abs=1e-9)
        assert min(abs(h - 360.0 * hh), 360.0 - abs(h - 360.0 * hh)) < 1e-6
    assert 0.0 <= h < 360.0


@given(unit, unit, unit)
def test_hsl_round_trip(r, g, b):
    assert np.allclose(hsl_to_rgb(rgb_to_hsl((r, g, b))), (r, g, b), atol=1e-6)


def test_hsl_array_form_matches_scalar():
    rgb = np.random.default_rng(3).uniform(size=(5, 4, 3))
    h, s, l = rgb_to_hsl(rgb)
    for idx in [(0, 0), (2, 3), (4, 1)]:
        assert (h[idx], s[idx], l[idx]) == pytest.approx(rgb_to_hsl(tuple(rgb[idx])), abs=1e-12)
    assert np.allclose(hsl_to_rgb(h, s, l), rgb, atol=1e-9)


# --- file I/O -----------------------------------------------------------------------


def test_load_black_ppm(tmp_path):
    p = tmp_path / "black.ppm"
    p.write_bytes(ppm_bytes(2, 2, [0] * 12))
    img = load_image(p)
    assert img.shape == (2, 2) and not img.data.any()


def test_load_white_and_mid_gray(tmp_path):
    p = tmp_path / "w.ppm"
    p.write_bytes(ppm_bytes(1, 1, [255, 255, 255]))
    assert load_image(p).data.tolist() == [[[1.0, 1.0, 1.0]]]
    p.write_bytes(ppm_bytes(1, 1, [128, 128, 128]))
    v = ((128 / 255 + 0.055) / 1.055) ** 2.4
    assert np.allclose(load_image(p).data, v, atol=1e-12)
    assert round(v, 5) == 0.21586


def test_ppm_header_comments_and_dims(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# made by hand\n3 1\n255\n" + bytes(range(9)))
    img = load_image(p)
    assert (img.width, img.height) == (3, 1)
    assert img.to_srgb8().ravel().tolist() == list(range(9))


def test_missing_file(tmp_path):
    with pytest.raises(ImageNotFoundError):
        load_image(tmp_path / "nope.ppm")


def test_unsupported_format(tmp_path):
    p = tmp_path / "x.bmp"
    p.write_bytes(b"BM" + bytes(30))
    with pytest.raises(UnsupportedFormatError):
        load_image(p)
    p.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
    with pytest.raises(UnsupportedFormatError):
        load_image(p)


@pytest.mark.parametrize(
    "raw",
    [b"P6\n2 2\n255\n" + bytes(5), b"P6\n2\n", b"P6\nx 2\n255\n" + bytes(12), b"P6\n0 2\n255\n", b"\x89PNG\r\n\x1a\ngarbage"],
)
def test_corrupt_files(tmp_path, raw):
    p = tmp_path / "bad.img"
    p.write_bytes(raw)
    with pytest.raises(CorruptImageError):
        load_image(p)


def test_error_classes_are_distinct():
    assert len({ImageNotFoundError, UnsupportedFormatError, CorruptImageError}) == 3
    assert not issubclass(CorruptImageError, UnsupportedFormatError)


def test_save_zeros_and_ones(tmp_path):
    p = tmp_path / "z.ppm"
    save_image(ImageBuffer(np.zeros((2, 3, 3))), p)
    raw = p.read_bytes()
    assert raw.startswith(b"P6\n3 2\n255\n") and set(raw[len(b"P6\n3 2\n255\n"):]) == {0}
    save_image(ImageBuffer(np.ones((2, 3, 3))), p)
    assert set(p.read_bytes()[len(b"P6\n3 2\n255\n"):]) == {255}


@pytest.mark.parametrize("fmt", ["ppm", "png"])
def test_round_trip_within_quantisation(tmp_path, fmt):
    img = random_image(11, 9, 7, lo=-0.2, hi=1.3)
    path = tmp_path / f"r.{fmt}"
    save_image(img, path)
    back = load_image(path)
    # the 8-bit grid is uniform in tone space
    assert np.max(np.abs(back.tone() - img.tone())) <= 0.5 / 255 + 1e-12
    assert np.max(np.abs(back.data - img.clamped())) <= 1.15 / 255


def test_srgb8_images_round_trip_exactly(tmp_path):
    img = srgb8_image(5, 6, 5)
    for fmt in ("ppm", "png"):
        save_image(img, tmp_path / f"e.{fmt}")
        assert load_image(tmp_path / f"e.{fmt}") == img


def test_png_and_ppm_payloads_agree(tmp_path):
    img = random_image(2, 4, 4)
    save_image(img, tmp_path / "a.png")
    save_image(img, tmp_path / "a.ppm")
    assert load_image(tmp_path / "a.png") == load_image(tmp_path / "a.ppm")
    assert encode_ppm(img) == (tmp_path / "a.ppm").read_bytes()


def test_unwritable_path(tmp_path):
    with pytest.raises(Exception):
        save_image(ImageBuffer(np.zeros((1, 1, 3))), tmp_path / "missing" / "dir" / "x.ppm")


# --- statistics ---------------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_stats_match_two_pass_oracle(seed):
    img = random_image(seed, 7, 9)
    s = image_stats(img)
    ref = stats_oracle(img)
    for key in ("mean_luma", "std_luma", "mean_saturation", "warmth", "clipped_high_frac", "clipped_low_frac"):
        assert getattr(s, key) == pytest.approx(ref[key], abs=1e-6), key
    assert np.allclose(s.channel_means, ref["channel_means"], atol=1e-6)
    assert np.allclose(s.luma_hist, ref["luma_hist"], atol=1e-12)


def test_stats_mid_gray_and_white():
    gray = image_stats(ImageBuffer.filled(4, 4, 0.2))
    assert gray.std_luma == 0.0
    assert gray.clipped_high_frac == 0.0 and gray.clipped_low_frac == 0.0
    white = image_stats(ImageBuffer.filled(3, 2, 1.0))
    assert white.clipped_high_frac == 1.0 and white.mean_luma == pytest.approx(1.0, abs=1e-12)


def test_mid_gray_histogram_concentrated():
    s = image_stats(ImageBuffer.filled(5, 5, srgb_to_linear(0.55)))
    assert s.luma_hist[4] == 1.0 and sum(s.luma_hist) == 1.0


@given(st.integers(0, 2**32 - 1))
def test_stats_ranges_and_hist(seed):
    s = image_stats(random_image(seed, 5, 6, lo=-0.1, hi=1.2))
    assert all(0.0 <= v <= 1.0 for v in (s.mean_luma, s.std_luma, s.mean_saturation, s.clipped_high_frac, s.clipped_low_frac))
    assert -1.0 <= s.warmth <= 1.0
    assert min(s.luma_hist) >= 0.0 and abs(sum(s.luma_hist) - 1.0) <= 1e-6


@given(st.integers(0, 2**32 - 1))
def test_stats_invariant_under_pixel_shuffle(seed):
    img = random_image(seed, 6, 5)
    rng = np.random.default_rng(seed)
    flat = img.data.reshape(-1, 3)[rng.permutation(30)]
    shuffled = ImageBuffer(flat.reshape(6, 5, 3))
    assert image_stats(shuffled) == image_stats(img)
    # a different raster shape with the same pixel multiset gives the same statistics too
    assert image_stats(ImageBuffer(flat.reshape(3, 10, 3))) == image_stats(img)


def test_summary_order():
    s = image_stats(random_image(4))
    assert s.summary().tolist() == [
        s.mean_luma,
        s.std_luma,
        s.mean_saturation,
        s.warmth,
        s.clipped_high_frac,
        s.clipped_low_frac,
    ]
