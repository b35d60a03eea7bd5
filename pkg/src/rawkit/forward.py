"""Forward rendering: packed RAW through the classical stage chain to RGB.

Stage order: normalize -> shading gain -> white balance -> demosaic -> color
matrix -> tone curve -> display gamma -> 8-bit quantize.  Raw-domain stages
act on the packed (h/2, w/2, 4) frame; RGB-domain stages on (h, w, 3).
Forward stages clamp into [0, 1] and record clipped samples in the mask;
inverse stages never clamp.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .model import (
    IspParams,
    ParamError,
    RawImage,
    RgbImage,
    round_half_away,
    validate_params,
)

# Fixed monotone tone basis: every curve maps [0,1] onto [0,1] increasingly,
# so any convex combination does too.
TONE_BASIS_NAMES = ("linear", "smoothstep", "square", "sqrt")

TONE_BASIS = (
    lambda x: x,
    lambda x: x * x * (3.0 - 2.0 * x),
    lambda x: x * x,
    lambda x: np.sqrt(x),
)

_TONE_BISECT_ITERS = 52  # halving from [0,1]: bracket below float64 spacing


def _check_direction(direction: str) -> bool:
    if direction not in ("forward", "inverse"):
        raise ParamError("direction must be 'forward' or 'inverse'")
    return direction == "forward"


def normalize_black_white(raw: RawImage, p: IspParams):
    """DN -> [0,1] by black subtraction and range scaling; marks saturation."""
    if p.white_level <= p.black_level:
        raise ParamError("black_level not below white_level")
    dn = raw.data.astype(np.float64)
    out = (dn - p.black_level) / (p.white_level - p.black_level)
    np.clip(out, 0.0, 1.0, out=out)
    mask = raw.data >= p.white_level
    return out, mask


def shading_field(shape, shading) -> np.ndarray:
    """Radial gain g(r) = a0 + a1 r^2 + a2 r^4 sampled at pixel centers.

    r is normalized so the corner samples land exactly on r = 1.
    """
    h, w = shape
    a0, a1, a2 = shading
    ny = np.zeros(h) if h == 1 else (np.arange(h) - (h - 1) / 2.0) / ((h - 1) / 2.0)
    nx = np.zeros(w) if w == 1 else (np.arange(w) - (w - 1) / 2.0) / ((w - 1) / 2.0)
    r2 = 0.5 * (ny[:, None] ** 2 + nx[None, :] ** 2)
    return a0 + a1 * r2 + a2 * r2 * r2


def apply_shading_gain(img: np.ndarray, p: IspParams, direction: str) -> np.ndarray:
    """Multiplies (forward) or divides (inverse) by the radial gain field."""
    fwd = _check_direction(direction)
    g = shading_field(img.shape[:2], p.shading)[:, :, None]
    return img * g if fwd else img / g


def apply_wb(img: np.ndarray, p: IspParams, direction: str, mask=None):
    """Per-channel white-balance gains on the packed frame.

    Forward clamps into [0,1] and extends the mask where clamping clipped a
    sample; inverse divides without clamping.
    """
    fwd = _check_direction(direction)
    gains = p.wb_gains4()
    if not fwd:
        return img / gains, mask
    out = img * gains
    clipped = out > 1.0
    np.clip(out, 0.0, 1.0, out=out)
    if mask is not None:
        mask = mask | clipped
    return out, mask


def demosaic_bilinear(raw4: np.ndarray) -> np.ndarray:
    """Packed (h/2, w/2, 4) -> full-resolution (h, w, 3) RGB.

    Scatters samples to their RGGB mosaic sites, fills the gaps by bilinear
    interpolation of same-color neighbors (edge-replicated at borders), and
    re-imposes the original samples so sites round-trip bit-exactly.
    """
    h2, w2 = raw4.shape[:2]
    h, w = 2 * h2, 2 * w2
    kernel = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]])
    sites = {
        0: [((0, 0), raw4[:, :, 0])],                            # R
        1: [((0, 1), raw4[:, :, 1]), ((1, 0), raw4[:, :, 2])],   # G1, G2
        2: [((1, 1), raw4[:, :, 3])],                            # B
    }
    out = np.empty((h, w, 3))
    for plane_idx, placements in sites.items():
        plane = np.zeros((h, w))
        present = np.zeros((h, w))
        for (dy, dx), samples in placements:
            plane[dy::2, dx::2] = samples
            present[dy::2, dx::2] = 1.0
        num = ndimage.convolve(plane, kernel, mode="nearest")
        den = ndimage.convolve(present, kernel, mode="nearest")
        filled = num / den
        for (dy, dx), samples in placements:
            filled[dy::2, dx::2] = samples
        out[:, :, plane_idx] = filled
    return out


def apply_ccm(img: np.ndarray, p: IspParams, direction: str, mask=None):
    """3x3 color matrix per pixel; forward clamps to [0,1], inverse does not."""
    fwd = _check_direction(direction)
    m = p.ccm if fwd else np.linalg.inv(p.ccm)
    out = img @ m.T
    if fwd:
        clipped = (out < 0.0) | (out > 1.0)
        np.clip(out, 0.0, 1.0, out=out)
        if mask is not None:
            mask = mask | clipped.any(axis=-1)
    return out, mask


def tone_forward(x: np.ndarray, weights) -> np.ndarray:
    acc = np.zeros_like(x, dtype=np.float64)
    for wk, ck in zip(weights, TONE_BASIS):
        if wk != 0.0:
            acc += wk * ck(x)
    return acc


def tone_inverse(y: np.ndarray, weights) -> np.ndarray:
    """Solves t(x) = y by bisection; t is strictly increasing on [0,1]."""
    y = np.clip(y, 0.0, 1.0)
    lo = np.zeros_like(y, dtype=np.float64)
    hi = np.ones_like(y, dtype=np.float64)
    for _ in range(_TONE_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        below = tone_forward(mid, weights) < y
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def apply_tone_curve(img: np.ndarray, p: IspParams, direction: str) -> np.ndarray:
    fwd = _check_direction(direction)
    if len(p.tone_weights) != len(TONE_BASIS):
        raise ParamError("tone_weights length must match the %d-curve basis"
                         % len(TONE_BASIS))
    if fwd:
        return tone_forward(img, p.tone_weights)
    return tone_inverse(img, p.tone_weights)


def srgb_oetf(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lo = 12.92 * x
    hi = 1.055 * np.power(np.maximum(x, 1e-12), 1.0 / 2.4) - 0.055
    return np.where(x <= 0.0031308, lo, hi)


def srgb_eotf(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    lo = v / 12.92
    hi = np.power((v + 0.055) / 1.055, 2.4)
    return np.where(v <= 0.04045, lo, hi)


def apply_gamma(img: np.ndarray, p: IspParams, direction: str) -> np.ndarray:
    fwd = _check_direction(direction)
    if p.gamma.kind == "srgb":
        return srgb_oetf(img) if fwd else srgb_eotf(img)
    e = p.gamma.exponent
    return np.power(img, 1.0 / e) if fwd else np.power(img, e)


def quantize_rgb8(img: np.ndarray) -> RgbImage:
    """Real [0,1] image -> stored 8-bit levels, ties rounding away from zero."""
    v8 = round_half_away(255.0 * np.clip(img, 0.0, 1.0))
    return RgbImage(v8.astype(np.uint8))


@dataclass
class StageTrace:
    """Ordered record of per-stage outputs, kept as references."""

    entries: list = field(default_factory=list)

    def add(self, name: str, snapshot) -> None:
        self.entries.append((name, snapshot))

    def names(self):
        return [n for n, _ in self.entries]


def _mask_to_rgb_grid(mask4: np.ndarray) -> np.ndarray:
    # Scatter packed-site clips onto the mosaic, then grow by the demosaic
    # kernel footprint: every output pixel that surely drew on a clipped
    # sample is tainted.
    h2, w2 = mask4.shape[:2]
    m = np.zeros((2 * h2, 2 * w2), dtype=bool)
    m[0::2, 0::2] = mask4[:, :, 0]
    m[0::2, 1::2] = mask4[:, :, 1]
    m[1::2, 0::2] = mask4[:, :, 2]
    m[1::2, 1::2] = mask4[:, :, 3]
    return ndimage.maximum_filter(m, size=3, mode="nearest")


def run_forward(raw: RawImage, p: IspParams, trace: bool = False,
                quantize: bool = True):
    """Renders a packed frame to RGB.

    Returns (RgbImage, clip mask (h, w)); with trace=True a StageTrace is
    appended.  quantize=False skips the final 8-bit step and returns the
    post-gamma real image instead.
    """
    validate_params(p)
    tr = StageTrace() if trace else None
    img, mask4 = normalize_black_white(raw, p)
    if tr:
        tr.add("normalize", img)
    img = apply_shading_gain(img, p, "forward")
    if tr:
        tr.add("shading", img)
    img, mask4 = apply_wb(img, p, "forward", mask4)
    if tr:
        tr.add("wb", img)
    rgb = demosaic_bilinear(img)
    mask = _mask_to_rgb_grid(mask4)
    if tr:
        tr.add("demosaic", rgb)
    rgb, mask = apply_ccm(rgb, p, "forward", mask)
    if tr:
        tr.add("ccm", rgb)
    rgb = apply_tone_curve(rgb, p, "forward")
    if tr:
        tr.add("tone", rgb)
    rgb = apply_gamma(rgb, p, "forward")
    if tr:
        tr.add("gamma", rgb)
    if quantize:
        out = quantize_rgb8(rgb)
    else:
        out = RgbImage(np.clip(rgb, 0.0, 1.0))
    if tr:
        tr.add("quantize", out.data)
        return out, mask, tr
    return out, mask


def render_quicklook(raw: RawImage) -> RgbImage:
    """Half-resolution preview: averaged greens, smoothstep tone, sRGB gamma."""
    dn = raw.data.astype(np.float64)
    v = (dn - raw.black_level) / (raw.white_level - raw.black_level)
    np.clip(v, 0.0, 1.0, out=v)
    rgb = np.stack([v[:, :, 0], 0.5 * (v[:, :, 1] + v[:, :, 2]), v[:, :, 3]],
                   axis=-1)
    rgb = rgb * rgb * (3.0 - 2.0 * rgb)
    return quantize_rgb8(srgb_oetf(rgb))
