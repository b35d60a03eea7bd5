"""RAW-domain scoring: metrics, dihedral self-ensembling, batch reports, timing.

PSNR accumulates through math.fsum so the result is independent of pixel
ordering — simultaneous dihedral transforms of both inputs change nothing,
bit for bit.  SSIM is single-scale, 11x11 Gaussian window (sigma 1.5),
C1=0.01^2, C2=0.03^2, reflection padding, peak 1.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from . import dataio, forward, reverse
from .fit import overexposure_mask
from .model import (
    DIHEDRAL_ELEMENTS,
    DIHEDRAL_INVERSE,
    FLIP_ELEMENTS,
    IspParams,
    ParamError,
    PipelineError,
    RawImage,
    RgbImage,
    dihedral_spatial,
    dihedral_transform_rgb,
    round_half_away,
)

PSNR_CAP_DB = 100.0

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5


def _as_samples(img) -> np.ndarray:
    if isinstance(img, RawImage):
        lo, hi = img.black_level, img.white_level
        return np.clip((img.data.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
    if isinstance(img, RgbImage):
        return img.normalized()
    return np.asarray(img, dtype=np.float64)


def psnr(pred, gt, mask=None) -> float:
    """Peak-1 PSNR in dB over unmasked samples; identical inputs cap at 100."""
    a = _as_samples(pred)
    b = _as_samples(gt)
    if a.shape != b.shape:
        raise ParamError("psnr operands must share a shape")
    d = a - b
    if mask is not None:
        keep = ~np.asarray(mask, dtype=bool)
        if keep.ndim == d.ndim - 1:
            keep = keep[..., None] & np.ones(d.shape, dtype=bool)
        if keep.shape != d.shape:
            raise ParamError("mask shape does not match the images")
        d = d[keep]
    if d.size == 0:
        raise ParamError("fully masked input")
    mse = math.fsum((d * d).ravel()) / d.size
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(-10.0 * math.log10(mse), PSNR_CAP_DB)


def _gaussian_kernel(n: int, sigma: float) -> np.ndarray:
    x = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _ssim_plane(a: np.ndarray, b: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    def blur(x):
        y = convolve1d(x, kernel, axis=0, mode="reflect")
        return convolve1d(y, kernel, axis=1, mode="reflect")

    mu_a = blur(a)
    mu_b = blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return num / den


def ssim(pred, gt) -> float:
    """Mean single-scale SSIM over channels and space, dynamic range 1."""
    a = _as_samples(pred)
    b = _as_samples(gt)
    if a.shape != b.shape:
        raise ParamError("ssim operands must share a shape")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if min(a.shape[0], a.shape[1]) < _SSIM_WINDOW:
        raise ParamError("image smaller than the %dx%d ssim window"
                         % (_SSIM_WINDOW, _SSIM_WINDOW))
    kernel = _gaussian_kernel(_SSIM_WINDOW, _SSIM_SIGMA)
    vals = [np.mean(_ssim_plane(a[:, :, c], b[:, :, c], kernel))
            for c in range(a.shape[2])]
    return float(np.mean(vals))


# --- self-ensembling ---------------------------------------------------------

def self_ensemble(rgb: RgbImage, p: IspParams, opts=None, elements=None,
                  threads: int = 1) -> RawImage:
    """Averages reverse reconstructions over dihedral transforms of the input.

    Rotations change the aspect of a non-square image, so those fall back to
    the 4 flip elements (with a warning).  Each transformed reconstruction is
    mapped back by the inverse *spatial* action — the block-level input
    transform already keeps every sample on its own CFA channel — then the
    per-element DN fields are averaged and re-quantized once.
    """
    h, w = rgb.shape
    if elements is None:
        elements = DIHEDRAL_ELEMENTS
    if h != w and any(t not in FLIP_ELEMENTS for t in elements):
        elements = tuple(t for t in elements if t in FLIP_ELEMENTS)
        warnings.warn("non-square input: rotations skipped, flips-only ensemble")
    if not elements:
        raise ParamError("no ensemble elements")
    acc = None
    proto = None
    for t in elements:
        view = dihedral_transform_rgb(rgb, t)
        out, _mask = reverse.run_reverse(view, p, opts, threads=threads)
        back = dihedral_spatial(out.data, DIHEDRAL_INVERSE[t])
        proto = out
        if acc is None:
            acc = back.astype(np.float64)
        else:
            acc += back
    dn = round_half_away(acc / len(elements))
    dn = np.clip(dn, 0, 2 ** proto.bit_depth - 1).astype(np.uint16)
    return RawImage(dn, bit_depth=proto.bit_depth,
                    black_level=proto.black_level,
                    white_level=proto.white_level,
                    pattern_of_origin=proto.pattern_of_origin)


# --- scoring -----------------------------------------------------------------

@dataclass(frozen=True)
class ScoreRecord:
    id: str
    split: str
    psnr_db: float = None
    ssim: float = None
    masked_psnr_db: float = None
    milliseconds: float = None
    status: str = "ok"           # "ok" | "error"
    error: str = None


@dataclass(frozen=True)
class ScoreReport:
    run: str
    records: tuple

    @property
    def ok(self) -> bool:
        return all(r.status == "ok" for r in self.records)

    def aggregates(self) -> dict:
        out = {}
        for r in self.records:
            if r.status != "ok":
                continue
            bucket = out.setdefault(r.split, {"psnr_db": 0.0, "ssim": 0.0,
                                              "count": 0})
            bucket["psnr_db"] += r.psnr_db
            bucket["ssim"] += r.ssim
            bucket["count"] += 1
        for bucket in out.values():
            bucket["psnr_db"] /= bucket["count"]
            bucket["ssim"] /= bucket["count"]
        return out


def _mask_to_sites(mask: np.ndarray) -> np.ndarray:
    return np.stack([mask[0::2, 0::2], mask[0::2, 1::2],
                     mask[1::2, 0::2], mask[1::2, 1::2]], axis=-1)


def score_run(pred_dir: str, manifest: dataio.DatasetManifest, *,
              tau: float = 0.98, bit_depth: int = 10, black_level: int = 64,
              white_level: int = 1023, run: str = "run") -> ScoreReport:
    """Scores prediction files named after each entry's raw file.

    Entries without ground-truth raw are skipped; a missing or unreadable
    prediction becomes an error row that drops out of the aggregates.
    """
    records = []
    entries = sorted((e for e in manifest.entries if e.raw_path is not None),
                     key=lambda e: e.identity())
    for entry in entries:
        t0 = time.perf_counter()
        pred_path = os.path.join(pred_dir, os.path.basename(entry.raw_path))
        try:
            gt = dataio.load_raw(manifest.resolve(entry.raw_path),
                                 bit_depth=bit_depth, black_level=black_level,
                                 white_level=white_level, pattern=entry.pattern)
            pred = dataio.load_raw(pred_path, bit_depth=bit_depth,
                                   black_level=black_level,
                                   white_level=white_level,
                                   pattern=entry.pattern)
            if pred.packed_shape != gt.packed_shape:
                raise ParamError("prediction shape %s does not match %s"
                                 % (pred.packed_shape, gt.packed_shape))
            plain = psnr(pred, gt)
            structural = ssim(pred, gt)
            if entry.rgb_path is not None:
                rgb = dataio.read_rgb_png(manifest.resolve(entry.rgb_path))
                m4 = _mask_to_sites(overexposure_mask(rgb, tau))
                masked = psnr(pred, gt, m4) if not m4.all() else plain
            else:
                masked = plain
            ms = (time.perf_counter() - t0) * 1000.0
            records.append(ScoreRecord(
                id=entry.identity(), split=entry.split, psnr_db=plain,
                ssim=structural, masked_psnr_db=masked, milliseconds=ms))
        except (OSError, PipelineError, dataio.FormatError) as exc:
            ms = (time.perf_counter() - t0) * 1000.0
            records.append(ScoreRecord(
                id=entry.identity(), split=entry.split, milliseconds=ms,
                status="error", error=str(exc)))
    return ScoreReport(run=run, records=tuple(records))


# --- report documents --------------------------------------------------------

_CSV_COLUMNS = ("run", "id", "split", "psnr_db", "ssim", "masked_psnr_db",
                "milliseconds", "status", "error")


def _as_reports(reports):
    if isinstance(reports, ScoreReport):
        return (reports,)
    return tuple(reports)


def emit_report(reports, format: str = "csv") -> str:
    """Renders one or more runs: csv = per-image rows (round-trippable),
    markdown = per-split aggregate table, json = full fidelity."""
    reports = _as_reports(reports)
    if format == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=_CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for rep in reports:
            for r in rep.records:
                row = {"run": rep.run, "id": r.id, "split": r.split,
                       "status": r.status, "error": r.error or ""}
                for k in ("psnr_db", "ssim", "masked_psnr_db", "milliseconds"):
                    v = getattr(r, k)
                    row[k] = "" if v is None else repr(v)
                w.writerow(row)
        return buf.getvalue()
    if format == "markdown":
        lines = ["| run | split | PSNR (dB) | SSIM | images |",
                 "|---|---|---|---|---|"]
        for rep in reports:
            agg = rep.aggregates()
            for split in sorted(agg):
                a = agg[split]
                lines.append("| %s | %s | %.2f | %.4f | %d |"
                             % (rep.run, split, a["psnr_db"], a["ssim"],
                                a["count"]))
        return "\n".join(lines) + "\n"
    if format == "json":
        doc = []
        for rep in reports:
            doc.append({
                "run": rep.run,
                "records": [{k: getattr(r, k) for k in
                             ("id", "split", "psnr_db", "ssim",
                              "masked_psnr_db", "milliseconds", "status",
                              "error")} for r in rep.records],
                "aggregates": rep.aggregates(),
            })
        return json.dumps({"runs": doc}, indent=2) + "\n"
    raise ParamError("format must be csv, markdown, or json")


def _record_from_row(row) -> ScoreRecord:
    def num(v):
        return None if v in ("", None) else float(v)

    return ScoreRecord(id=row["id"], split=row["split"],
                       psnr_db=num(row["psnr_db"]), ssim=num(row["ssim"]),
                       masked_psnr_db=num(row["masked_psnr_db"]),
                       milliseconds=num(row["milliseconds"]),
                       status=row["status"], error=row["error"] or None)


def load_report_csv(text: str) -> tuple:
    """Parses emit_report(csv) back into ScoreReports, one per run label."""
    rows = list(csv.DictReader(io.StringIO(text)))
    by_run, order = {}, []
    for row in rows:
        if row["run"] not in by_run:
            by_run[row["run"]] = []
            order.append(row["run"])
        by_run[row["run"]].append(_record_from_row(row))
    return tuple(ScoreReport(run=name, records=tuple(by_run[name]))
                 for name in order)


def load_report_json(text: str) -> tuple:
    doc = json.loads(text)
    out = []
    for rep in doc["runs"]:
        records = tuple(ScoreRecord(**r) for r in rep["records"])
        out.append(ScoreReport(run=rep["run"], records=records))
    return tuple(out)


# --- timing ------------------------------------------------------------------

def time_pipeline(image_size, p: IspParams = None, repeats: int = 5, *,
                  threads: int = 1, seed: int = 0) -> dict:
    """Median run_reverse wall time on a synthetic image; warm-up excluded."""
    if repeats < 3:
        raise ParamError("repeats must be at least 3")
    p = p or dataio.default_params()
    h, w = image_size
    rng = np.random.default_rng(seed)
    rgb = RgbImage(rng.integers(0, 256, (h, w, 3), dtype=np.uint8))
    reverse.run_reverse(rgb, p, threads=threads)  # warm-up
    timings = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        reverse.run_reverse(rgb, p, threads=threads)
        timings.append((time.perf_counter() - t0) * 1000.0)
    med = float(np.median(timings))
    mp = h * w / 1e6
    return {"median_ms": med, "ms_per_megapixel": med / mp,
            "timings_ms": timings}
