"""Deterministic execution of edit programs.

Stages always run in this order, whatever order the program lists its ops:

 1. white balance (linear)           6. tone curve
 2. exposure (linear)                7. HSL bands
 -- encode to sRGB tone space --     8. vibrance
 3. contrast                         9. saturation
 4. highlights / shadows             -- decode to linear --
 5. whites / blacks                 10. local (masked) ops, in index order
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .constants import BAND_CENTERS, CONSTANTS, PipelineConstants
from .dsl import EditProgram, InvalidProgramError, LocalOp, MaskSpec, validate_program
from .image import ImageBuffer, hsl_to_rgb, linear_to_srgb, rgb_to_hsl, srgb_to_linear


def smoothstep(edge0: float, edge1: float, x):
    t = np.clip((np.asarray(x, dtype=np.float64) - edge0) / (edge1 - edge0), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


# --- tone curve --------------------------------------------------------------------


def _curve_knots(points) -> tuple[np.ndarray, np.ndarray]:
    pts = [tuple(map(float, p)) for p in points]
    if pts[0][0] > 0.0:
        pts.insert(0, (0.0, 0.0))
    if pts[-1][0] < 1.0:
        pts.append((1.0, 1.0))
    xs, ys = zip(*pts)
    return np.array(xs), np.array(ys)


def fritsch_carlson_slopes(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    h = np.diff(xs)
    delta = np.diff(ys) / h
    m = np.empty_like(xs)
    m[0] = delta[0]
    m[-1] = delta[-1]
    m[1:-1] = (delta[:-1] + delta[1:]) / 2.0
    # local extrema and flat neighbours get zero slope
    m[1:-1][delta[:-1] * delta[1:] <= 0.0] = 0.0
    for k in range(len(delta)):
        if delta[k] == 0.0:
            m[k] = m[k + 1] = 0.0
            continue
        # alpha^2 + beta^2 > 9 test, written with hypot so tiny secants cannot overflow
        norm = np.hypot(m[k], m[k + 1])
        if norm > 3.0 * abs(delta[k]):
            scale = 3.0 * abs(delta[k]) / norm
            m[k] *= scale
            m[k + 1] *= scale
    return m


def tone_curve_eval(points, x):
    """Monotone cubic (Fritsch-Carlson) interpolation through the control points.

    Endpoints (0,0) and (1,1) are added when the curve does not reach them.
    """
    xs, ys = _curve_knots(points)
    m = fritsch_carlson_slopes(xs, ys)
    xq = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    k = np.clip(np.searchsorted(xs, xq, side="right") - 1, 0, len(xs) - 2)
    h = xs[k + 1] - xs[k]
    t = (xq - xs[k]) / h
    t2 = t * t
    t3 = t2 * t
    out = (
        (2 * t3 - 3 * t2 + 1) * ys[k]
        + (t3 - 2 * t2 + t) * h * m[k]
        + (-2 * t3 + 3 * t2) * ys[k + 1]
        + (t3 - t2) * h * m[k + 1]
    )
    out = np.clip(out, 0.0, 1.0)
    return out if out.ndim else float(out)


# --- masks -------------------------------------------------------------------------


def mask_weight(mask: MaskSpec, x, y):
    """Blend weight in [0, 1] at normalised coordinates (x, y)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if mask.kind == "radial":
        cx, cy = mask.center
        dist = np.hypot(x - cx, y - cy)
        inner = mask.radius * (1.0 - mask.feather)
        if inner >= mask.radius:
            w = (dist <= mask.radius).astype(np.float64)
        else:
            w = 1.0 - smoothstep(inner, mask.radius, dist)
    else:
        (ax, ay), (bx, by) = mask.start, mask.end
        dx, dy = bx - ax, by - ay
        w = np.clip(((x - ax) * dx + (y - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    w = np.asarray(w, dtype=np.float64)
    return w if w.ndim else float(w)


# --- stages ------------------------------------------------------------------------


def _white_balance(lin: np.ndarray, temperature: float, tint: float, c: PipelineConstants) -> np.ndarray:
    if temperature == 0.0 and tint == 0.0:
        return lin
    gains = np.array(
        [
            2.0 ** (c.temperature_half_stops * temperature / 100.0),
            2.0 ** (-c.tint_half_stops * tint / 100.0),
            2.0 ** (-c.temperature_half_stops * temperature / 100.0),
        ]
    )
    return lin * gains


def _exposure(lin: np.ndarray, ev: float) -> np.ndarray:
    if ev == 0.0:
        return lin
    return lin * 2.0**ev


def _tone_ops(t: np.ndarray, p: EditProgram, c: PipelineConstants) -> np.ndarray:
    contrast = p.scalar("contrast")
    if contrast:
        t = np.clip(0.5 + (t - 0.5) * (1.0 + contrast / 100.0), 0.0, 1.0)

    hi, sh = p.scalar("highlights"), p.scalar("shadows")
    if hi or sh:
        w_hi = smoothstep(0.5, 1.0, t)
        w_sh = 1.0 - smoothstep(0.0, 0.5, t)
        k = c.highlight_shadow_strength
        t = np.clip(t + k * (hi / 100.0) * w_hi * (1.0 - t) + k * (sh / 100.0) * w_sh * (1.0 - t), 0.0, 1.0)

    wh, bl = p.scalar("whites"), p.scalar("blacks")
    if wh or bl:
        w_hi = smoothstep(0.5, 1.0, t)
        w_sh = 1.0 - smoothstep(0.0, 0.5, t)
        t = np.clip(t * (1.0 + c.whites_gain * (wh / 100.0) * w_hi) + c.blacks_offset * (bl / 100.0) * w_sh, 0.0, 1.0)

    curve = p.tone_curve()
    if curve is not None:
        t = tone_curve_eval(curve.points, t)
    return t


def _band_weight(hue: np.ndarray, center: float, half_width: float) -> np.ndarray:
    d = np.abs((hue - center + 180.0) % 360.0 - 180.0)
    return np.maximum(0.0, 1.0 - d / half_width)


def _color_ops(t: np.ndarray, p: EditProgram, c: PipelineConstants) -> np.ndarray:
    bands = p.hsl_ops()
    vib, sat = p.scalar("vibrance"), p.scalar("saturation")
    if not bands and not vib and not sat:
        return t
    h, s, l = rgb_to_hsl(t)
    if bands:
        hue_shift = np.zeros_like(h)
        sat_gain = np.zeros_like(h)
        lum_add = np.zeros_like(h)
        # achromatic pixels have no hue and belong to no band
        chromatic = s > 0.0
        for op in bands:
            w = _band_weight(h, BAND_CENTERS[op.band], c.hue_band_half_width) * chromatic
            v = op.value / 100.0
            if op.field == "hue":
                hue_shift += w * v * c.max_hue_shift
            elif op.field == "sat":
                sat_gain += w * v
            else:
                lum_add += w * v * c.hsl_lum_gain
        h = (h + hue_shift) % 360.0
        s = np.clip(s * (1.0 + sat_gain), 0.0, 1.0)
        l = np.clip(l + lum_add, 0.0, 1.0)
    if vib:
        s = np.clip(s * (1.0 + (vib / 100.0) * (1.0 - s)), 0.0, 1.0)
    if sat:
        s = np.clip(s * (1.0 + sat / 100.0), 0.0, 1.0)
    return hsl_to_rgb(h, s, l)


def _local_op(base: np.ndarray, op: LocalOp, xs: np.ndarray, ys: np.ndarray, c: PipelineConstants) -> np.ndarray:
    adj = op.adjustments()
    edited = _white_balance(base, adj.get("temperature", 0.0), 0.0, c)
    edited = _exposure(edited, adj.get("exposure", 0.0))
    if adj.get("saturation"):
        h, s, l = rgb_to_hsl(linear_to_srgb(edited))
        s = np.clip(s * (1.0 + adj["saturation"] / 100.0), 0.0, 1.0)
        edited = srgb_to_linear(hsl_to_rgb(h, s, l))
    w = mask_weight(op.mask, xs, ys)[..., None]
    return base + w * (edited - base)


_TONE_STAGE_KEYS = ("contrast", "highlights", "shadows", "whites", "blacks", "vibrance", "saturation")


def _needs_tone_space(p: EditProgram) -> bool:
    return any(p.scalar(k) for k in _TONE_STAGE_KEYS) or p.tone_curve() is not None or bool(p.hsl_ops())


def _run_rows(data: np.ndarray, p: EditProgram, row0: int, height: int, width: int, c: PipelineConstants):
    lin = _white_balance(data, p.scalar("temperature"), p.scalar("tint"), c)
    lin = _exposure(lin, p.scalar("exposure"))
    if _needs_tone_space(p):
        t = linear_to_srgb(lin)
        t = _tone_ops(t, p, c)
        t = _color_ops(t, p, c)
        lin = srgb_to_linear(t)
    local_ops = p.local_ops()
    if local_ops:
        rows = (np.arange(row0, row0 + data.shape[0]) + 0.5) / height
        cols = (np.arange(width) + 0.5) / width
        xs, ys = np.meshgrid(cols, rows)
        for op in local_ops:
            lin = _local_op(lin, op, xs, ys, c)
    return np.clip(lin, 0.0, 1.0)


def execute(
    img: ImageBuffer,
    p: EditProgram,
    *,
    constants: PipelineConstants = CONSTANTS,
    threads: int = 1,
    check: bool = True,
) -> ImageBuffer:
    """Apply ``p`` to ``img``; with ``threads > 1`` rows are processed in bands.

    Every stage is per-pixel, so banding does not change any output bit.
    """
    if check:
        report = validate_program(p)
        if not report.ok:
            raise InvalidProgramError(report)
    if not p.ops:
        return img
    height, width = img.shape
    if threads <= 1 or height < 2 * threads:
        return ImageBuffer(_run_rows(img.data, p, 0, height, width, constants))
    bounds = np.linspace(0, height, threads + 1).astype(int)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(
            pool.map(
                lambda ab: _run_rows(img.data[ab[0] : ab[1]], p, ab[0], height, width, constants),
                zip(bounds[:-1], bounds[1:]),
            )
        )
    return ImageBuffer(np.concatenate(parts, axis=0))
