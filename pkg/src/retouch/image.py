"""Image buffers, sRGB/HSL colour math, PNG/PPM file I/O and global image statistics.

Pixels live in linear-light RGB as float64 arrays of shape ``(height, width, 3)``.
Files are 8-bit sRGB. Perceptual quantities (luma, saturation, warmth) are
measured on the sRGB-encoded "tone" values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Rec.709 luma weights
LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])

_SRGB_KNEE = 0.04045
_LINEAR_KNEE = _SRGB_KNEE / 12.92
HIST_BINS = 8


class ImageError(Exception):
    """Base class for image I/O failures."""


class ImageNotFoundError(ImageError):
    pass


class UnsupportedFormatError(ImageError):
    pass


class CorruptImageError(ImageError):
    pass


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """Linear-light RGB raster; ``data`` has shape (height, width, 3)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, order="C", copy=True)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected (height, width, 3) samples, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must have at least one pixel")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image samples must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    def __eq__(self, other):
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    __hash__ = None

    @classmethod
    def filled(cls, width: int, height: int, rgb) -> "ImageBuffer":
        data = np.empty((height, width, 3))
        data[...] = np.asarray(rgb, dtype=np.float64)
        return cls(data)

    @classmethod
    def from_srgb8(cls, pixels: np.ndarray) -> "ImageBuffer":
        """Decode an (h, w, 3) uint8 sRGB array."""
        return cls(srgb_to_linear(np.asarray(pixels, dtype=np.float64) / 255.0))

    def clamped(self) -> np.ndarray:
        return np.clip(self.data, 0.0, 1.0)

    def tone(self) -> np.ndarray:
        """sRGB-encoded values in [0, 1] (clamped first)."""
        return linear_to_srgb(self.data)

    def to_srgb8(self) -> np.ndarray:
        return quantize8(self.tone())


# --- transfer functions ----------------------------------------------------------


def srgb_to_linear(v):
    """sRGB EOTF. Inputs are clamped to [0, 1]; works on scalars and arrays."""
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    out = np.where(v <= _SRGB_KNEE, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)
    return out if out.ndim else float(out)


def linear_to_srgb(v):
    """Inverse of :func:`srgb_to_linear`."""
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    # the two sRGB pieces leave a ~2e-9 gap above the knee; pin that gap to the knee
    # value so the curve stays monotone and exactly inverts srgb_to_linear
    power = np.maximum(1.055 * v ** (1.0 / 2.4) - 0.055, _SRGB_KNEE)
    out = np.where(v <= _LINEAR_KNEE, v * 12.92, power)
    out = np.where(v >= 1.0, 1.0, out)  # the power branch lands one ulp short of 1
    return out if out.ndim else float(out)


def quantize8(tone: np.ndarray) -> np.ndarray:
    """Round-half-up quantisation of [0, 1] tone values to uint8."""
    t = np.clip(np.asarray(tone, dtype=np.float64), 0.0, 1.0)
    return np.floor(t * 255.0 + 0.5).astype(np.uint8)


# --- HSL ---------------------------------------------------------------------------


def rgb_to_hsl(rgb):
    """Convert RGB in [0, 1] to (hue degrees, saturation, lightness).

    Accepts a length-3 sequence or an array whose last axis is RGB. Gray
    inputs get ``s = 0`` and ``h = 0``.
    """
    arr = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
    mx = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    chroma = mx - mn
    light = (mx + mn) / 2.0
    gray = chroma <= 0.0
    safe_c = np.where(gray, 1.0, chroma)

    denom = 1.0 - np.abs(2.0 * light - 1.0)
    sat = np.where(gray | (denom <= 0.0), 0.0, chroma / np.where(denom <= 0.0, 1.0, denom))
    sat = np.clip(sat, 0.0, 1.0)

    hr = ((g - b) / safe_c) % 6.0
    hg = (b - r) / safe_c + 2.0
    hb = (r - g) / safe_c + 4.0
    hue = np.where(mx == r, hr, np.where(mx == g, hg, hb)) * 60.0
    hue = np.where(gray, 0.0, hue % 360.0)
    if arr.ndim == 1:
        return float(hue), float(sat), float(light)
    return hue, sat, light


def hsl_to_rgb(h, s=None, l=None):
    """Inverse of :func:`rgb_to_hsl`; accepts a triple or three arrays."""
    scalar = s is None
    if scalar:
        h, s, l = h
    h = np.asarray(h, dtype=np.float64) % 360.0
    s = np.clip(np.asarray(s, dtype=np.float64), 0.0, 1.0)
    l = np.clip(np.asarray(l, dtype=np.float64), 0.0, 1.0)
    chroma = (1.0 - np.abs(2.0 * l - 1.0)) * s
    hp = h / 60.0
    x = chroma * (1.0 - np.abs(hp % 2.0 - 1.0))
    m = l - chroma / 2.0
    sector = np.floor(hp).astype(np.int64) % 6
    zero = np.zeros_like(chroma)
    r = np.choose(sector, [chroma, x, zero, zero, x, chroma])
    g = np.choose(sector, [x, chroma, chroma, x, zero, zero])
    b = np.choose(sector, [zero, zero, x, chroma, chroma, x])
    out = np.stack([r + m, g + m, b + m], axis=-1)
    out = np.clip(out, 0.0, 1.0)
    if scalar:
        return tuple(float(c) for c in out)
    return out


# --- file I/O ----------------------------------------------------------------------


def _read_ppm(raw: bytes) -> np.ndarray:
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptImageError("truncated PPM header")
        tokens.append(raw[start:pos])
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise CorruptImageError("missing whitespace after PPM header")
    pos += 1
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise CorruptImageError(f"non-numeric PPM header field: {exc}") from None
    if width <= 0 or height <= 0:
        raise CorruptImageError(f"bad PPM dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormatError(f"only 8-bit PPM (maxval 255) is supported, got {maxval}")
    payload = raw[pos:]
    need = width * height * 3
    if len(payload) < need:
        raise CorruptImageError(f"PPM payload has {len(payload)} bytes, expected {need}")
    return np.frombuffer(payload[:need], dtype=np.uint8).reshape(height, width, 3)


def load_image(path) -> ImageBuffer:
    """Read an 8-bit PNG or binary PPM (P6) file into linear RGB."""
    path = Path(path)
    if not path.is_file():
        raise ImageNotFoundError(f"no such image file: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"P6":
        pixels = _read_ppm(raw)
    elif raw[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        try:
            with Image.open(path) as im:
                im.load()
                if im.mode not in ("RGB", "RGBA", "L", "P", "LA"):
                    raise UnsupportedFormatError(f"unsupported PNG mode {im.mode}")
                pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except UnsupportedFormatError:
            raise
        except Exception as exc:
            raise CorruptImageError(f"cannot decode PNG {path}: {exc}") from None
    else:
        raise UnsupportedFormatError(f"{path}: not a PNG or binary PPM (P6) file")
    return ImageBuffer.from_srgb8(pixels)


def encode_ppm(img: ImageBuffer) -> bytes:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.to_srgb8().tobytes()


def save_image(img: ImageBuffer, path, format: str | None = None) -> None:
    """Write ``img`` as 8-bit sRGB. ``format`` defaults to the file suffix."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".") or "ppm").lower()
    try:
        if fmt == "ppm":
            path.write_bytes(encode_ppm(img))
        elif fmt == "png":
            from PIL import Image

            Image.fromarray(img.to_srgb8(), mode="RGB").save(path, format="PNG")
        else:
            raise UnsupportedFormatError(f"cannot write format {fmt!r}")
    except OSError as exc:
        raise ImageError(f"cannot write {path}: {exc}") from None


# --- statistics --------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureStats:
    mean_luma: float
    std_luma: float
    mean_saturation: float
    warmth: float
    channel_means: tuple[float, float, float]
    clipped_high_frac: float
    clipped_low_frac: float
    luma_hist: tuple[float, ...] = field(default_factory=tuple)

    def summary(self) -> np.ndarray:
        """The six scalar statistics used as model features."""
        return np.array(
            [
                self.mean_luma,
                self.std_luma,
                self.mean_saturation,
                self.warmth,
                self.clipped_high_frac,
                self.clipped_low_frac,
            ]
        )


def _hsl_saturation(tone: np.ndarray) -> np.ndarray:
    mx = tone.max(axis=-1)
    mn = tone.min(axis=-1)
    light = (mx + mn) / 2.0
    denom = 1.0 - np.abs(2.0 * light - 1.0)
    chroma = mx - mn
    with np.errstate(divide="ignore", invalid="ignore"):
        sat = np.where(denom > 0.0, chroma / np.where(denom > 0.0, denom, 1.0), 0.0)
    return np.clip(sat, 0.0, 1.0)


def _exact_mean(values: np.ndarray) -> float:
    # correctly rounded, hence independent of pixel order
    return math.fsum(values.ravel().tolist()) / values.size


def image_stats(img: ImageBuffer) -> FeatureStats:
    tone = img.tone().reshape(-1, 3)
    luma = tone @ LUMA_WEIGHTS
    n = luma.size
    mean_luma = _exact_mean(luma)
    std_luma = math.sqrt(_exact_mean((luma - mean_luma) ** 2))
    hist = np.bincount(np.minimum((luma * HIST_BINS).astype(np.int64), HIST_BINS - 1), minlength=HIST_BINS)
    channel_means = [_exact_mean(tone[:, c]) for c in range(3)]
    return FeatureStats(
        mean_luma=min(max(mean_luma, 0.0), 1.0),
        std_luma=min(std_luma, 1.0),
        mean_saturation=_exact_mean(_hsl_saturation(tone)),
        warmth=channel_means[0] - channel_means[2],
        channel_means=tuple(channel_means),
        clipped_high_frac=np.count_nonzero(luma >= 0.99) / n,
        clipped_low_frac=np.count_nonzero(luma <= 0.01) / n,
        luma_hist=tuple(float(c) for c in hist / n),
    )
