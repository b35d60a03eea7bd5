"""Reversed pipeline: display RGB back to packed sensor DN.

Every stage is the analytic inverse of its forward counterpart, composed as
dequantize -> gamma^-1 -> tone^-1 -> matrix^-1 -> mosaic -> gains^-1 ->
shading^-1 -> DN quantize.  The whole chain is pointwise per sample site, so
the image is processed in independent row strips: strip order never changes
the arithmetic, which keeps threaded output bit-identical to sequential.

8-bit inputs take a 256-entry lookup table for the two scalar nonlinearities;
the table is built by evaluating the real stage inverses on all 256 codes, so
the fast path is exactly the slow path.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import dataio, forward
from .model import (
    BayerPattern,
    DimensionError,
    IspParams,
    ParamError,
    RawImage,
    RgbImage,
    round_half_away,
    validate_params,
)

_STRIP_ROWS = 128  # packed rows per work unit

# canonical channel -> (ccm row, dy, dx) of the pixel it samples
_SITES = ((0, 0, 0), (1, 0, 1), (1, 1, 0), (2, 1, 1))


@dataclass(frozen=True)
class ReverseOptions:
    output_bit_depth: int = 10
    clip_policy: str = "clamp"   # "mark" additionally flags out-of-range samples
    dither: bool = False         # uniform ±0.5 DN noise before rounding
    dither_seed: int = 0

    def __post_init__(self):
        if self.output_bit_depth not in (10, 12, 14):
            raise ParamError("output_bit_depth not one of {10, 12, 14}")
        if self.clip_policy not in ("clamp", "mark"):
            raise ParamError("clip_policy must be 'clamp' or 'mark'")


def mosaic_rggb(rgb_linear: np.ndarray) -> np.ndarray:
    """Fixed CFA sampling: each 2x2 pixel block yields one (R, G, G, B) vector.

    Exact inverse of the sample-site-preserving demosaic.
    """
    h, w = rgb_linear.shape[:2]
    if h % 2 or w % 2:
        raise DimensionError("mosaic needs even image dimensions")
    return np.stack([
        rgb_linear[0::2, 0::2, 0],
        rgb_linear[0::2, 1::2, 1],
        rgb_linear[1::2, 0::2, 1],
        rgb_linear[1::2, 1::2, 2],
    ], axis=-1)


def quantize_raw(img4: np.ndarray, p: IspParams,
                 opts: ReverseOptions | None = None) -> RawImage:
    """Real [0,1] samples back to integer DN at the params' levels."""
    opts = opts or ReverseOptions(output_bit_depth=p.bit_depth)
    dn = p.black_level + np.asarray(img4, dtype=np.float64) \
        * (p.white_level - p.black_level)
    if opts.dither:
        rng = np.random.default_rng(opts.dither_seed)
        dn = dn + rng.uniform(-0.5, 0.5, size=dn.shape)
    dn = round_half_away(dn)
    top = (1 << p.bit_depth) - 1
    data = np.clip(dn, 0, top).astype(np.uint16)
    return RawImage(data, p.bit_depth, p.black_level, p.white_level,
                    BayerPattern.RGGB)


def _linearize_table(p: IspParams) -> np.ndarray:
    """code/255 pushed through gamma and tone inverses, for all 256 codes."""
    v = np.arange(256, dtype=np.float64) / 255.0
    return forward.tone_inverse(forward.apply_gamma(v, p, "inverse"),
                                p.tone_weights)


def _reverse_strip(out, mask, u8, flt, lut, p, minv, shade, noise, r0, r1, mark):
    """Processes packed rows [r0, r1) of the reverse chain into out/mask."""
    gains = p.wb_gains4()
    top_range = p.white_level - p.black_level
    top = (1 << p.bit_depth) - 1
    for c, (row, dy, dx) in enumerate(_SITES):
        if flt is None:
            px = u8[2 * r0 + dy:2 * r1:2, dx::2, :]
            sat = (px == 255).any(axis=-1)
            lr, lg, lb = lut[px[:, :, 0]], lut[px[:, :, 1]], lut[px[:, :, 2]]
        else:
            px = flt[2 * r0 + dy:2 * r1:2, dx::2, :]
            sat = (px >= 1.0).any(axis=-1)
            lin = forward.tone_inverse(
                forward.apply_gamma(px, p, "inverse"), p.tone_weights)
            lr, lg, lb = lin[:, :, 0], lin[:, :, 1], lin[:, :, 2]
        v = minv[row, 0] * lr + minv[row, 1] * lg + minv[row, 2] * lb
        v /= gains[c]
        v /= shade[r0:r1]
        bad = (v < 0.0) | (v > 1.0) if mark else None
        dn = p.black_level + v * top_range
        if noise is not None:
            dn += noise[r0:r1, :, c]
        dn = np.clip(round_half_away(dn), 0, top)
        np.copyto(dn, p.white_level, where=sat)
        out[r0:r1, :, c] = dn
        m = sat if bad is None else (sat | bad)
        mask[r0:r1, :, c] = m


def run_reverse(rgb: RgbImage, p: IspParams,
                opts: ReverseOptions | None = None, threads: int = 1):
    """RGB image -> (RawImage, ClipMask).

    The mask marks packed samples whose source pixel had any channel at the
    8-bit ceiling (unrecoverable highlights, forced to white_level); with
    clip_policy="mark" it also flags samples clamped at the DN range edges.
    """
    validate_params(p)
    opts = opts or ReverseOptions(output_bit_depth=p.bit_depth)
    if opts.output_bit_depth != p.bit_depth:
        raise ParamError("output_bit_depth disagrees with params bit_depth")
    h, w = rgb.shape
    if h % 2 or w % 2:
        raise DimensionError("reverse needs even image dimensions")
    h2, w2 = h // 2, w // 2

    if rgb.is_stored:
        u8, flt = rgb.data, None
        lut = _linearize_table(p)
    else:
        u8, flt, lut = None, rgb.data, None
    minv = np.linalg.inv(p.ccm)
    shade = forward.shading_field((h2, w2), p.shading)
    noise = None
    if opts.dither:
        # one full-field draw so strip boundaries cannot move the noise
        rng = np.random.default_rng(opts.dither_seed)
        noise = rng.uniform(-0.5, 0.5, size=(h2, w2, 4))

    out = np.empty((h2, w2, 4), dtype=np.float64)
    mask = np.empty((h2, w2, 4), dtype=bool)
    mark = opts.clip_policy == "mark"
    bounds = list(range(0, h2, _STRIP_ROWS)) + [h2]
    jobs = [(r0, r1) for r0, r1 in zip(bounds, bounds[1:]) if r1 > r0]
    if threads < 1:
        threads = os.cpu_count() or 1
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(
                lambda j: _reverse_strip(out, mask, u8, flt, lut, p, minv,
                                         shade, noise, j[0], j[1], mark),
                jobs))
    else:
        for r0, r1 in jobs:
            _reverse_strip(out, mask, u8, flt, lut, p, minv, shade, noise,
                           r0, r1, mark)
    raw = RawImage(out.astype(np.uint16), p.bit_depth, p.black_level,
                   p.white_level, BayerPattern.RGGB)
    return raw, mask


def unprocess_batch(manifest, p: IspParams, out_dir,
                    opts: ReverseOptions | None = None, threads: int = 1,
                    reverse_fn=None) -> list:
    """Reconstructs RAW for every RGB entry; per-file failures do not abort.

    Returns one record per processed entry: {"path", "out", "status",
    "milliseconds"} plus "error" on failures.  reverse_fn replaces the plain
    single-shot reverse (the ensembling hook); it takes (RgbImage) and
    returns a RawImage.
    """
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for entry in manifest.entries:
        if entry.rgb_path is None:
            continue
        t0 = time.perf_counter()
        rec = {"path": entry.rgb_path, "status": "ok"}
        try:
            rgb = dataio.read_rgb_png(manifest.resolve(entry.rgb_path))
            if reverse_fn is None:
                raw, _ = run_reverse(rgb, p, opts, threads)
            else:
                raw = reverse_fn(rgb)
            name = os.path.splitext(os.path.basename(entry.rgb_path))[0] + ".npy"
            out_path = os.path.join(out_dir, name)
            dataio.write_array(out_path, raw.data)
            rec["out"] = out_path
        except Exception as e:  # error isolation: keep the batch going
            rec["status"] = "error"
            rec["error"] = "%s: %s" % (type(e).__name__, e)
        rec["milliseconds"] = 1000.0 * (time.perf_counter() - t0)
        records.append(rec)
    return records
