"""Dataset ingestion and persistence.

Hand-rolled NPY v1.0 codec for packed frames (bit-exact interop with numpy's
own writer), 8-bit RGB PNG io, non-overlapping crop extraction, dataset
manifests ("rawkit-manifest-v1"), parameter documents ("rawkit-params-v1"),
and the seeded synthetic scene generator used for desk-scale verification.
"""

from __future__ import annotations

import ast
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from . import forward
from .model import (
    BayerPattern,
    DimensionError,
    GammaCurve,
    IspParams,
    ParamError,
    PipelineError,
    RawImage,
    RgbImage,
    round_half_away,
    validate_params,
)


class FormatError(PipelineError):
    """A file's bytes do not match the declared format."""


class SchemaError(PipelineError):
    """A JSON document violates its schema."""


# --- NPY v1.0 codec ----------------------------------------------------------
# Layout: magic \x93NUMPY, version 01 00, little-endian uint16 header length,
# then a python-dict header padded with spaces (newline-terminated) so the
# payload starts on a 64-byte boundary, then raw little-endian sample words.

_NPY_MAGIC = b"\x93NUMPY"


def write_array(path, arr: np.ndarray) -> None:
    """Writes a packed (h/2, w/2, 4) uint16 array as an NPY v1.0 file."""
    a = np.asarray(arr)
    if a.ndim != 3 or a.shape[2] != 4:
        raise FormatError("array shape must be (h/2, w/2, 4)")
    if a.dtype != np.uint16:
        raise FormatError("array dtype must be uint16")
    header = "{'descr': '<u2', 'fortran_order': False, 'shape': (%d, %d, %d), }" % a.shape
    unpadded = len(_NPY_MAGIC) + 2 + 2 + len(header) + 1
    header = header + " " * ((64 - unpadded % 64) % 64) + "\n"
    with open(path, "wb") as f:
        f.write(_NPY_MAGIC)
        f.write(b"\x01\x00")
        f.write(struct.pack("<H", len(header)))
        f.write(header.encode("latin1"))
        f.write(np.ascontiguousarray(a, dtype="<u2").tobytes())


def read_array(path) -> np.ndarray:
    """Reads an NPY v1.0 packed frame; errors name the offending field."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:6] != _NPY_MAGIC:
        raise FormatError("bad magic: not an NPY file")
    if blob[6:8] != b"\x01\x00":
        raise FormatError("unsupported NPY version (need 1.0)")
    if len(blob) < 10:
        raise FormatError("truncated NPY header length")
    (hlen,) = struct.unpack("<H", blob[8:10])
    header = blob[10:10 + hlen]
    if len(header) != hlen:
        raise FormatError("truncated NPY header")
    try:
        meta = ast.literal_eval(header.decode("latin1"))
        if not isinstance(meta, dict):
            raise ValueError
    except (ValueError, SyntaxError):
        raise FormatError("unparseable NPY header") from None
    if meta.get("descr") != "<u2":
        raise FormatError("dtype must be little-endian uint16 ('<u2')")
    if meta.get("fortran_order") is not False:
        raise FormatError("fortran_order must be False (C-contiguous)")
    shape = meta.get("shape")
    if (not isinstance(shape, tuple) or len(shape) != 3 or shape[2] != 4
            or any(not isinstance(s, int) or s < 1 for s in shape)):
        raise FormatError("shape must be a (h/2, w/2, 4) triple")
    payload = blob[10 + hlen:]
    need = 2 * shape[0] * shape[1] * shape[2]
    if len(payload) != need:
        raise FormatError("payload size %d does not match shape (need %d)"
                          % (len(payload), need))
    return np.frombuffer(payload, dtype="<u2").reshape(shape).astype(np.uint16)


def load_raw(path, *, bit_depth: int = 10, black_level: int = 64,
             white_level: int = 1023,
             pattern: BayerPattern = BayerPattern.RGGB) -> RawImage:
    """Reads an NPY file and wraps it with radiometric metadata.

    The sidecar-free dataset layout carries no levels, so callers pass them
    (defaults match the 10-bit convention used throughout).
    """
    return RawImage(read_array(path), bit_depth, black_level, white_level, pattern)


# --- PNG io ------------------------------------------------------------------

def _check_png_header(blob: bytes) -> None:
    if blob[:8] != b"\x89PNG\r\n\x1a\n":
        raise FormatError("not a PNG file")
    if len(blob) < 26 or blob[12:16] != b"IHDR":
        raise FormatError("PNG missing IHDR")
    bit_depth, color_type = blob[24], blob[25]
    if color_type == 3:
        raise FormatError("palette PNG unsupported (need 8-bit RGB)")
    if color_type in (4, 6):
        raise FormatError("PNG alpha channel unsupported (need 8-bit RGB)")
    if color_type != 2:
        raise FormatError("grayscale PNG unsupported (need 8-bit RGB)")
    if bit_depth != 8:
        raise FormatError("%d-bit PNG unsupported (need 8-bit RGB)" % bit_depth)


def read_rgb_png(path) -> RgbImage:
    """Reads an 8-bit truecolor PNG; anything else is a format error."""
    with open(path, "rb") as f:
        blob = f.read()
    _check_png_header(blob)
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.uint8)
    return RgbImage(arr)


def write_rgb_png(path, img: RgbImage) -> None:
    Image.fromarray(img.stored(), mode="RGB").save(path, format="PNG")


# --- crops -------------------------------------------------------------------

def extract_crops(img, crop: int):
    """Row-major non-overlapping crop×crop tiles with their (x, y) offsets.

    crop counts full-resolution pixels for both input kinds; a packed frame is
    tiled in crop/2 packed steps.  Right/bottom remainders are discarded.
    """
    crop = int(crop)
    if crop < 2 or crop % 2:
        raise ParamError("crop size must be even and positive")
    if isinstance(img, RawImage):
        h, w = img.mosaic_shape
        if crop > h or crop > w:
            raise DimensionError("crop %d exceeds image extent %dx%d" % (crop, w, h))
        step = crop // 2
        out = []
        for iy in range(h // crop):
            for ix in range(w // crop):
                tile = img.data[iy * step:(iy + 1) * step, ix * step:(ix + 1) * step]
                out.append((img.with_data(tile), (ix * crop, iy * crop)))
        return out
    if isinstance(img, RgbImage):
        h, w = img.shape
        if crop > h or crop > w:
            raise DimensionError("crop %d exceeds image extent %dx%d" % (crop, w, h))
        out = []
        for iy in range(h // crop):
            for ix in range(w // crop):
                tile = img.data[iy * crop:(iy + 1) * crop, ix * crop:(ix + 1) * crop]
                out.append((RgbImage(tile), (ix * crop, iy * crop)))
        return out
    raise ParamError("extract_crops needs a RawImage or RgbImage")


# --- parameter documents -----------------------------------------------------

PARAMS_SCHEMA = "rawkit-params-v1"


def save_params(p: IspParams, path) -> None:
    validate_params(p)
    doc = {
        "schema": PARAMS_SCHEMA,
        "black_level": p.black_level,
        "white_level": p.white_level,
        "bit_depth": p.bit_depth,
        "wb_gains": list(p.wb_gains),
        "ccm": [[float(v) for v in row] for row in p.ccm],
        "tone_weights": list(p.tone_weights),
        "gamma": ({"kind": "srgb"} if p.gamma.kind == "srgb"
                  else {"kind": "power", "exponent": p.gamma.exponent}),
        "shading": list(p.shading),
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


_PARAM_KEYS = {"schema", "black_level", "white_level", "bit_depth", "wb_gains",
               "ccm", "tone_weights", "gamma", "shading"}


def load_params(path) -> IspParams:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError("params file is not valid JSON: %s" % e) from None
    if not isinstance(doc, dict):
        raise SchemaError("params document must be a JSON object")
    if doc.get("schema") != PARAMS_SCHEMA:
        raise SchemaError("schema tag must be %r" % PARAMS_SCHEMA)
    unknown = set(doc) - _PARAM_KEYS
    if unknown:
        raise SchemaError("unknown params fields: %s" % ", ".join(sorted(unknown)))
    missing = _PARAM_KEYS - set(doc)
    if missing:
        raise SchemaError("missing params fields: %s" % ", ".join(sorted(missing)))
    g = doc["gamma"]
    if not isinstance(g, dict) or "kind" not in g:
        raise SchemaError("gamma must be an object with a 'kind'")
    if g["kind"] == "srgb":
        if set(g) != {"kind"}:
            raise SchemaError("srgb gamma takes no extra fields")
        gamma = GammaCurve.srgb()
    elif g["kind"] == "power":
        if set(g) != {"kind", "exponent"}:
            raise SchemaError("power gamma needs exactly an 'exponent'")
        gamma = GammaCurve.power(float(g["exponent"]))
    else:
        raise SchemaError("gamma kind must be 'srgb' or 'power'")
    try:
        p = IspParams(
            black_level=int(doc["black_level"]),
            white_level=int(doc["white_level"]),
            bit_depth=int(doc["bit_depth"]),
            wb_gains=tuple(doc["wb_gains"]),
            ccm=np.array(doc["ccm"], dtype=np.float64),
            tone_weights=tuple(doc["tone_weights"]),
            gamma=gamma,
            shading=tuple(doc["shading"]),
        )
        validate_params(p)
    except (TypeError, ValueError) as e:
        raise SchemaError("invalid parameter values: %s" % e) from None
    return p


# --- manifests ---------------------------------------------------------------

MANIFEST_SCHEMA = "rawkit-manifest-v1"
SPLITS = ("train", "val", "test1", "test2")
ALIGNMENTS = ("aligned", "misaligned")


@dataclass(frozen=True)
class ManifestEntry:
    split: str
    pattern: BayerPattern
    rgb_path: str | None = None
    raw_path: str | None = None
    frame_offset: tuple | None = None  # (x, y) in full-resolution pixels
    alignment: str = "aligned"

    def identity(self) -> str:
        """Stable id: the stem of the RAW (preferred) or RGB path."""
        path = self.raw_path or self.rgb_path
        return os.path.splitext(os.path.basename(path))[0]


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple
    root: str = "."

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    def resolve(self, rel_path: str) -> str:
        return os.path.normpath(os.path.join(self.root, rel_path))


_ENTRY_KEYS = {"rgb_path", "raw_path", "split", "pattern", "frame_offset",
               "alignment"}


def _parse_entry(e, idx: int) -> ManifestEntry:
    where = "entry %d" % idx
    if not isinstance(e, dict):
        raise SchemaError("%s must be an object" % where)
    unknown = set(e) - _ENTRY_KEYS
    if unknown:
        raise SchemaError("%s has unknown fields: %s" % (where, ", ".join(sorted(unknown))))
    for req in ("split", "pattern"):
        if req not in e:
            raise SchemaError("%s missing required field %r" % (where, req))
    if e["split"] not in SPLITS:
        raise SchemaError("%s split %r not in %s" % (where, e["split"], "/".join(SPLITS)))
    try:
        pattern = BayerPattern(e["pattern"])
    except ValueError:
        raise SchemaError("%s has unknown pattern %r" % (where, e["pattern"])) from None
    paths = {}
    for key in ("rgb_path", "raw_path"):
        v = e.get(key)
        if v is not None:
            if not isinstance(v, str) or not v:
                raise SchemaError("%s %s must be a non-empty string" % (where, key))
            if os.path.isabs(v):
                raise SchemaError("%s %s must be relative to root" % (where, key))
        paths[key] = v
    if paths["rgb_path"] is None and paths["raw_path"] is None:
        raise SchemaError("%s needs rgb_path or raw_path" % where)
    off = e.get("frame_offset")
    if off is not None:
        if (not isinstance(off, (list, tuple)) or len(off) != 2
                or any(not isinstance(v, int) or v < 0 for v in off)):
            raise SchemaError("%s frame_offset must be two nonnegative integers" % where)
        off = (off[0], off[1])
    alignment = e.get("alignment", "aligned")
    if alignment not in ALIGNMENTS:
        raise SchemaError("%s alignment %r not in %s"
                          % (where, alignment, "/".join(ALIGNMENTS)))
    return ManifestEntry(split=e["split"], pattern=pattern,
                         rgb_path=paths["rgb_path"], raw_path=paths["raw_path"],
                         frame_offset=off, alignment=alignment)


def parse_manifest(doc, base_dir: str) -> DatasetManifest:
    """Validates a manifest document; relative root resolves against base_dir."""
    if not isinstance(doc, dict):
        raise SchemaError("manifest must be a JSON object")
    unknown = set(doc) - {"schema", "root", "entries"}
    if unknown:
        raise SchemaError("unknown manifest fields: %s" % ", ".join(sorted(unknown)))
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise SchemaError("schema tag must be %r" % MANIFEST_SCHEMA)
    if "entries" not in doc or not isinstance(doc["entries"], list):
        raise SchemaError("manifest needs an 'entries' list")
    root = doc.get("root", ".")
    if not isinstance(root, str):
        raise SchemaError("root must be a string")
    if not os.path.isabs(root):
        root = os.path.normpath(os.path.join(base_dir, root))
    entries = tuple(_parse_entry(e, i) for i, e in enumerate(doc["entries"]))
    return DatasetManifest(entries=entries, root=root)


def load_manifest(path) -> DatasetManifest:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError("manifest is not valid JSON: %s" % e) from None
    return parse_manifest(doc, os.path.dirname(os.path.abspath(path)))


def save_manifest(manifest: DatasetManifest, path) -> None:
    entries = []
    for en in manifest.entries:
        d = {"split": en.split, "pattern": en.pattern.value}
        if en.rgb_path is not None:
            d["rgb_path"] = en.rgb_path
        if en.raw_path is not None:
            d["raw_path"] = en.raw_path
        if en.frame_offset is not None:
            d["frame_offset"] = list(en.frame_offset)
        if en.alignment != "aligned":
            d["alignment"] = en.alignment
        entries.append(d)
    doc = {"schema": MANIFEST_SCHEMA, "root": manifest.root, "entries": entries}
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


# --- stage trace export ------------------------------------------------------

def save_trace(trace, out_dir) -> list:
    """Writes each traced stage as a viewable PNG; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, (name, snap) in enumerate(trace.entries):
        a = np.asarray(snap)
        if a.dtype == np.uint8:
            rgb = a.astype(np.float64) / 255.0
        elif a.ndim == 3 and a.shape[2] == 4:
            # packed frame: show half-res RGB with greens averaged
            rgb = np.stack([a[:, :, 0], 0.5 * (a[:, :, 1] + a[:, :, 2]),
                            a[:, :, 3]], axis=-1)
        else:
            rgb = a
        img = forward.quantize_rgb8(np.clip(rgb, 0.0, 1.0))
        path = os.path.join(out_dir, "%02d_%s.png" % (i, name))
        write_rgb_png(path, img)
        paths.append(path)
    return paths


# --- canonical parameter sets ------------------------------------------------

def default_params() -> IspParams:
    """A fixed, plausible 10-bit pipeline used by demos and tests."""
    return IspParams(
        black_level=64,
        white_level=1023,
        bit_depth=10,
        wb_gains=(2.0, 1.0, 1.5),
        ccm=np.array([[1.55, -0.35, -0.20],
                      [-0.25, 1.45, -0.20],
                      [-0.05, -0.45, 1.50]]),
        tone_weights=(0.55, 0.25, 0.08, 0.12),
        gamma=GammaCurve.srgb(),
        shading=(1.0, 0.18, 0.06),
    )


# Convex pool of plausible color matrices (rows sum to 1, all invertible);
# random draws mix them so conditioning stays bounded.
_CCM_POOL = (
    np.array([[1.55, -0.35, -0.20], [-0.25, 1.45, -0.20], [-0.05, -0.45, 1.50]]),
    np.array([[1.80, -0.60, -0.20], [-0.30, 1.60, -0.30], [0.00, -0.50, 1.50]]),
    np.array([[1.40, -0.25, -0.15], [-0.20, 1.35, -0.15], [-0.05, -0.30, 1.35]]),
    np.array([[1.65, -0.45, -0.20], [-0.35, 1.70, -0.35], [-0.10, -0.40, 1.50]]),
)


def random_params(seed: int, bit_depth: int = 10) -> IspParams:
    """Seeded draw of a valid, well-conditioned parameter set."""
    rng = np.random.default_rng(seed)
    mix = rng.dirichlet(np.full(len(_CCM_POOL), 3.0))
    ccm = sum(w * m for w, m in zip(mix, _CCM_POOL))
    tone = rng.dirichlet((2.0, 2.0, 2.0, 2.0))
    tone = tone / tone.sum()
    gamma = GammaCurve.srgb() if rng.random() < 0.75 else \
        GammaCurve.power(float(rng.uniform(1.8, 2.4)))
    top = (1 << bit_depth) - 1
    p = IspParams(
        black_level=64 << (bit_depth - 10),
        white_level=top,
        bit_depth=bit_depth,
        wb_gains=(float(rng.uniform(1.6, 2.3)), 1.0, float(rng.uniform(1.3, 1.9))),
        ccm=ccm,
        tone_weights=tuple(float(w) for w in tone),
        gamma=gamma,
        shading=(1.0, float(rng.uniform(0.0, 0.45)), float(rng.uniform(0.0, 0.25))),
    )
    validate_params(p)
    return p


# --- synthetic scenes --------------------------------------------------------

SCENE_KINDS = ("gradient", "color_checker", "radial_vignette", "noise_field",
               "mixed")

# 24 fixed patch colors in display-linear RGB, loosely spanning the classic
# chart: skin/sky/foliage row, strong primaries, then a neutral ramp.
_CHECKER_COLORS = np.array([
    [0.45, 0.32, 0.27], [0.78, 0.58, 0.51], [0.36, 0.48, 0.61], [0.34, 0.42, 0.26],
    [0.51, 0.50, 0.69], [0.39, 0.74, 0.66], [0.85, 0.54, 0.16], [0.27, 0.35, 0.66],
    [0.76, 0.35, 0.38], [0.36, 0.23, 0.42], [0.62, 0.74, 0.25], [0.88, 0.64, 0.18],
    [0.19, 0.24, 0.57], [0.28, 0.58, 0.27], [0.69, 0.21, 0.23], [0.91, 0.78, 0.12],
    [0.73, 0.33, 0.58], [0.12, 0.52, 0.61], [0.92, 0.92, 0.90], [0.79, 0.79, 0.78],
    [0.63, 0.63, 0.63], [0.46, 0.46, 0.46], [0.30, 0.30, 0.31], [0.16, 0.16, 0.17],
])


@dataclass(frozen=True)
class SceneSpec:
    kind: str
    size: tuple = (128, 128)   # full-resolution (h, w), both even
    bit_depth: int = 10
    seed: int = 0
    params: dict = field(default_factory=dict)  # per-kind knobs

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ParamError("scene kind must be one of %s" % ", ".join(SCENE_KINDS))
        size = self.size
        if isinstance(size, int):
            size = (size, size)
        size = (int(size[0]), int(size[1]))
        if size[0] < 8 or size[1] < 8 or size[0] % 2 or size[1] % 2:
            raise DimensionError("scene size must be even and at least 8x8")
        object.__setattr__(self, "size", size)
        if self.bit_depth not in (10, 12, 14):
            raise ParamError("bit_depth not one of {10, 12, 14}")


def _scene_gradient(h, w, rng):
    ramp = 0.05 + 0.87 * (np.arange(w) / (w - 1.0))
    tilt = 0.9 + 0.1 * np.cos(np.linspace(0.0, 2.0 * np.pi, h))
    chan = np.array([1.0, 0.96, 0.90])
    return ramp[None, :, None] * tilt[:, None, None] * chan[None, None, :]


def _scene_checker(h, w, rng):
    img = np.empty((h, w, 3))
    ph, pw = h // 4, w // 6
    for i in range(4):
        for j in range(6):
            y1 = h if i == 3 else (i + 1) * ph
            x1 = w if j == 5 else (j + 1) * pw
            img[i * ph:y1, j * pw:x1] = _CHECKER_COLORS[i * 6 + j]
    return img


def _scene_flat(h, w, rng):
    body = np.array([0.58, 0.55, 0.50])
    wave = 1.0 + 0.06 * np.sin(np.linspace(0, 3 * np.pi, h))[:, None, None]
    return np.broadcast_to(body * wave, (h, w, 3)).copy()


def _scene_noise(h, w, rng):
    cells = (max(2, h // 16), max(2, w // 16))
    base = rng.random(cells)
    chroma = 0.12 * (rng.random(cells + (3,)) - 0.5)
    field_lo = np.clip(base[:, :, None] + chroma, 0.0, 1.0)
    zy, zx = h / cells[0], w / cells[1]
    field = ndimage.zoom(field_lo, (zy, zx, 1.0), order=1, grid_mode=True,
                         mode="nearest")
    return 0.06 + 0.84 * field[:h, :w]


def _smooth(img):
    for _ in range(2):
        img = ndimage.uniform_filter(img, size=(3, 3, 1), mode="nearest")
    return img


def _scene_target(spec: SceneSpec, rng) -> np.ndarray:
    h, w = spec.size
    if spec.kind == "gradient":
        return _scene_gradient(h, w, rng)
    if spec.kind == "color_checker":
        return _smooth(_scene_checker(h, w, rng))
    if spec.kind == "radial_vignette":
        return _scene_flat(h, w, rng)
    if spec.kind == "noise_field":
        return _scene_noise(h, w, rng)
    # mixed: quadrants of the other kinds, seams softened
    q = np.empty((h, w, 3))
    h2, w2 = h // 2, w // 2
    q[:h2, :w2] = _scene_gradient(h2, w2, rng)
    q[:h2, w2:] = _scene_checker(h2, w - w2, rng)
    q[h2:, :w2] = _scene_flat(h - h2, w2, rng)
    q[h2:, w2:] = _scene_noise(h - h2, w - w2, rng)
    return _smooth(q)


def generate_scene(spec: SceneSpec, p: IspParams):
    """Builds a (RawImage, RgbImage) pair that the forward pipeline connects.

    The display-linear target is pushed backwards through the linear stages
    (matrix, gains, shading) to sensor samples, globally rescaled so no
    forward stage clips, quantized to DN, and finally re-rendered so the
    returned RGB is exactly run_forward of the returned RAW.
    """
    validate_params(p)
    if spec.bit_depth != p.bit_depth:
        raise ParamError("scene bit depth disagrees with params")
    rng = np.random.default_rng(spec.seed)
    target = np.clip(_scene_target(spec, rng), 0.0, 0.95)
    h, w = spec.size

    sensor = target @ np.linalg.inv(p.ccm).T          # undo color matrix
    sensor /= np.asarray(p.wb_gains)                  # undo channel gains
    np.clip(sensor, 0.0, None, out=sensor)
    packed = np.stack([sensor[0::2, 0::2, 0], sensor[0::2, 1::2, 1],
                       sensor[1::2, 0::2, 1], sensor[1::2, 1::2, 2]], axis=-1)
    packed /= forward.shading_field(packed.shape[:2], p.shading)[:, :, None]

    # one global exposure scale keeps every linear stage inside [0, 1]
    wb_peak = float(np.max(packed
                           * forward.shading_field(packed.shape[:2], p.shading)[:, :, None]
                           * p.wb_gains4()))
    peak = max(float(packed.max()), wb_peak, float(target.max()))
    if peak > 0.92:
        packed *= 0.92 / peak

    lo, hi = p.black_level, p.white_level
    dn = round_half_away(lo + packed * (hi - lo))
    raw = RawImage(np.clip(dn, 0, (1 << p.bit_depth) - 1).astype(np.uint16),
                   p.bit_depth, lo, hi, BayerPattern.RGGB)
    rgb, _ = forward.run_forward(raw, p)
    return raw, rgb
