"""Core image types, parameter validation, and Bayer channel algebra.

Packed RAW frames store each 2x2 sensor block as one 4-vector in the fixed
canonical order (R, G-on-R-row, G-on-B-row, B), regardless of the pattern the
samples came from.  All types are immutable once constructed.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

# Canonical channel order for packed data.
CHANNEL_NAMES = ("R", "G1", "G2", "B")

VALID_BIT_DEPTHS = (10, 12, 14)


class PipelineError(ValueError):
    """Base class for rawkit errors."""


class ParamError(PipelineError):
    """A parameter or option violates its contract."""


class DimensionError(PipelineError):
    """Image dimensions are incompatible with the requested operation."""


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Rounds to nearest integer with ties going away from zero."""
    x = np.asarray(x)
    return np.where(x >= 0, np.floor(x + 0.5), np.ceil(x - 0.5))


class BayerPattern(Enum):
    """The four 2x2 color filter layouts."""

    RGGB = "rggb"
    BGGR = "bggr"
    GRBG = "grbg"
    GBRG = "gbrg"

    @property
    def channel_offsets(self):
        """(dy, dx) of each canonical (R, G1, G2, B) sample inside a block."""
        return _PATTERN_OFFSETS[self]


# For each pattern: where the canonical channels sit inside a 2x2 block.
# G1 is always the green sharing a row with red, G2 the green on the blue row.
_PATTERN_OFFSETS = {
    BayerPattern.RGGB: ((0, 0), (0, 1), (1, 0), (1, 1)),
    BayerPattern.BGGR: ((1, 1), (1, 0), (0, 1), (0, 0)),
    BayerPattern.GRBG: ((0, 1), (0, 0), (1, 1), (1, 0)),
    BayerPattern.GBRG: ((1, 0), (1, 1), (0, 0), (0, 1)),
}


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class RawImage:
    """Packed 4-channel Bayer frame plus its radiometric metadata."""

    data: np.ndarray  # (h/2, w/2, 4) uint16 in canonical channel order
    bit_depth: int = 10
    black_level: int = 64
    white_level: int = 1023
    pattern_of_origin: BayerPattern = BayerPattern.RGGB

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 3 or d.shape[2] != 4:
            raise DimensionError("packed RAW data must have shape (h/2, w/2, 4)")
        if d.shape[0] < 1 or d.shape[1] < 1:
            raise DimensionError("packed RAW data must be at least 1x1")
        if not np.issubdtype(d.dtype, np.integer):
            raise ParamError("packed RAW samples must be integers")
        if self.bit_depth not in VALID_BIT_DEPTHS:
            raise ParamError("bit_depth not one of {10, 12, 14}")
        top = (1 << self.bit_depth) - 1
        if d.size and (int(d.min()) < 0 or int(d.max()) > top):
            raise ParamError(
                "sample values outside the %d-bit range [0, %d]" % (self.bit_depth, top)
            )
        if not (0 <= self.black_level < self.white_level <= top):
            raise ParamError("require 0 <= black_level < white_level <= 2^bit_depth - 1")
        if not isinstance(self.pattern_of_origin, BayerPattern):
            raise ParamError("pattern_of_origin must be a BayerPattern")
        object.__setattr__(self, "data", _freeze(d.astype(np.uint16, copy=True)))

    @property
    def packed_shape(self):
        return self.data.shape[:2]

    @property
    def mosaic_shape(self):
        h2, w2 = self.data.shape[:2]
        return (2 * h2, 2 * w2)

    def with_data(self, data: np.ndarray) -> "RawImage":
        """Same metadata, new samples."""
        return RawImage(data, self.bit_depth, self.black_level, self.white_level,
                        self.pattern_of_origin)


@dataclass(frozen=True)
class RgbImage:
    """Interleaved RGB image, either stored 8-bit or normalized real in [0, 1]."""

    data: np.ndarray  # (h, w, 3): uint8, or float64 in [0, 1]

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 3 or d.shape[2] != 3:
            raise DimensionError("RGB data must have shape (h, w, 3)")
        if d.shape[0] < 1 or d.shape[1] < 1:
            raise DimensionError("RGB data must be at least 1x1")
        if d.dtype == np.uint8:
            d = d.copy()
        elif np.issubdtype(d.dtype, np.floating):
            d = d.astype(np.float64, copy=True)
            if d.size and (d.min() < -1e-9 or d.max() > 1 + 1e-9):
                raise ParamError("normalized RGB values must lie in [0, 1]")
            np.clip(d, 0.0, 1.0, out=d)
        else:
            raise ParamError("RGB data must be uint8 or floating point")
        object.__setattr__(self, "data", _freeze(d))

    @property
    def is_stored(self) -> bool:
        return self.data.dtype == np.uint8

    @property
    def shape(self):
        return self.data.shape[:2]

    def normalized(self) -> np.ndarray:
        """Image as float64 in [0, 1]."""
        if self.is_stored:
            return self.data.astype(np.float64) / 255.0
        return self.data

    def stored(self) -> np.ndarray:
        """Image as uint8 levels."""
        if self.is_stored:
            return self.data
        return round_half_away(255.0 * self.data).astype(np.uint8)


# A ClipMask is a boolean array marking clipped/saturated samples.  It has the
# data shape of the image it annotates: (h, w) for RGB (any channel clipped),
# (h/2, w/2, 4) per-sample for packed RAW.
ClipMask = np.ndarray


@dataclass(frozen=True)
class GammaCurve:
    """Display transfer function: the piecewise sRGB curve or a pure power law."""

    kind: str = "srgb"      # "srgb" | "power"
    exponent: float = 2.2   # display exponent, used only for kind="power"

    def __post_init__(self):
        if self.kind not in ("srgb", "power"):
            raise ParamError("gamma kind must be 'srgb' or 'power'")
        if not (self.exponent > 0):
            raise ParamError("gamma exponent must be positive")

    @classmethod
    def srgb(cls) -> "GammaCurve":
        return cls("srgb")

    @classmethod
    def power(cls, exponent: float) -> "GammaCurve":
        return cls("power", float(exponent))


@dataclass(frozen=True, eq=False)
class IspParams:
    """Complete parameter set for one rendering pipeline."""

    black_level: int
    white_level: int
    bit_depth: int
    wb_gains: tuple            # (r, g, b) channel gains
    ccm: np.ndarray            # 3x3 color matrix, rows produce output channels
    tone_weights: tuple        # convex weights over the fixed tone basis
    gamma: GammaCurve
    shading: tuple             # (a0, a1, a2): gain a0 + a1 r^2 + a2 r^4

    def __post_init__(self):
        object.__setattr__(self, "wb_gains", tuple(float(g) for g in self.wb_gains))
        object.__setattr__(self, "tone_weights",
                           tuple(float(w) for w in self.tone_weights))
        object.__setattr__(self, "shading", tuple(float(a) for a in self.shading))
        object.__setattr__(
            self, "ccm", _freeze(np.array(self.ccm, dtype=np.float64, copy=True)))

    def __eq__(self, other):
        if not isinstance(other, IspParams):
            return NotImplemented
        return (self.black_level == other.black_level
                and self.white_level == other.white_level
                and self.bit_depth == other.bit_depth
                and self.wb_gains == other.wb_gains
                and np.array_equal(self.ccm, other.ccm)
                and self.tone_weights == other.tone_weights
                and self.gamma == other.gamma
                and self.shading == other.shading)

    @classmethod
    def identity(cls, bit_depth: int = 10, black_level: int = 64,
                 white_level: int = 1023) -> "IspParams":
        """Neutral parameters: unit gains, identity matrix and tone, sRGB display."""
        return cls(
            black_level=black_level,
            white_level=white_level,
            bit_depth=bit_depth,
            wb_gains=(1.0, 1.0, 1.0),
            ccm=np.eye(3),
            tone_weights=(1.0, 0.0, 0.0, 0.0),
            gamma=GammaCurve.srgb(),
            shading=(1.0, 0.0, 0.0),
        )

    def wb_gains4(self) -> np.ndarray:
        """Gains broadcast over packed channels (R, G1, G2, B)."""
        r, g, b = self.wb_gains
        return np.array([r, g, g, b])


def _shading_min_gain(shading) -> float:
    # g(r) = a0 + a1 u + a2 u^2 with u = r^2 in [0, 1]: check ends and the
    # interior stationary point.
    a0, a1, a2 = (float(a) for a in shading)
    candidates = [a0, a0 + a1 + a2]
    if a2 != 0.0:
        u = -a1 / (2.0 * a2)
        if 0.0 < u < 1.0:
            candidates.append(a0 + a1 * u + a2 * u * u)
    return min(candidates)


def validate_params(p: IspParams) -> None:
    """Raises ParamError naming the first violated constraint."""
    if p.bit_depth not in VALID_BIT_DEPTHS:
        raise ParamError("bit_depth not one of {10, 12, 14}")
    top = (1 << p.bit_depth) - 1
    if not (0 <= p.black_level < p.white_level):
        raise ParamError("black_level not below white_level")
    if p.white_level > top:
        raise ParamError("white_level above the %d-bit maximum %d" % (p.bit_depth, top))
    if len(p.wb_gains) != 3:
        raise ParamError("wb_gains must hold three gains")
    if any(not (g > 0.0) for g in p.wb_gains):
        raise ParamError("wb_gains not strictly positive")
    if p.ccm.shape != (3, 3):
        raise ParamError("color matrix must be 3x3")
    if abs(np.linalg.det(p.ccm)) <= 1e-8:
        raise ParamError("singular color matrix")
    w = np.asarray(p.tone_weights, dtype=np.float64)
    if w.size < 1 or w.min() < -1e-12 or abs(w.sum() - 1.0) > 1e-9:
        raise ParamError("tone_weights not a simplex point")
    if len(p.shading) != 3:
        raise ParamError("shading must hold three coefficients")
    if _shading_min_gain(p.shading) < 1.0 - 1e-12:
        raise ParamError("shading gain below 1 on the unit disk")


def pack_bayer(mosaic: np.ndarray, pattern: BayerPattern, *, bit_depth: int = 10,
               black_level: int = 64, white_level: int = 1023) -> RawImage:
    """Packs a single-channel mosaic into canonical (R, G1, G2, B) channels."""
    m = np.asarray(mosaic)
    if m.ndim != 2:
        raise DimensionError("mosaic must be a 2-D grid")
    if m.shape[0] % 2 or m.shape[1] % 2:
        raise DimensionError("mosaic dimensions must be even")
    if not np.issubdtype(m.dtype, np.integer):
        raise ParamError("mosaic must hold integer samples")
    h2, w2 = m.shape[0] // 2, m.shape[1] // 2
    out = np.empty((h2, w2, 4), dtype=np.uint16)
    for c, (dy, dx) in enumerate(pattern.channel_offsets):
        out[:, :, c] = m[dy::2, dx::2]
    return RawImage(out, bit_depth, black_level, white_level, pattern)


def unpack_bayer(raw: RawImage, pattern: BayerPattern | None = None) -> np.ndarray:
    """Scatters packed channels back onto a 2-D mosaic under the given pattern."""
    if pattern is None:
        pattern = raw.pattern_of_origin
    h2, w2 = raw.packed_shape
    m = np.empty((2 * h2, 2 * w2), dtype=np.uint16)
    for c, (dy, dx) in enumerate(pattern.channel_offsets):
        m[dy::2, dx::2] = raw.data[:, :, c]
    return m


# ---------------------------------------------------------------------------
# Dihedral transforms.
#
# The 8 elements of the square's symmetry group are indexed 0..7: element
# t = k + 4*f means "flip left-right if f, then rotate 90 degrees CCW k times".
# Elements 0, 2, 4, 6 never swap height and width.

DIHEDRAL_ELEMENTS = tuple(range(8))
FLIP_ELEMENTS = (0, 2, 4, 6)


def dihedral_spatial(arr: np.ndarray, t: int) -> np.ndarray:
    """Applies element t to the leading two axes, carrying trailing axes along."""
    if t not in DIHEDRAL_ELEMENTS:
        raise ParamError("dihedral element must be in 0..7")
    k, f = t % 4, t // 4
    out = arr
    if f:
        out = np.flip(out, axis=1)
    if k:
        out = np.rot90(out, k, axes=(0, 1))
    return np.ascontiguousarray(out)


# Channel index of each in-block offset, row-major.  Transforming this little
# grid with an element yields the channel permutation the packed form needs so
# that the result unpacks to the transformed mosaic.
_OFFSET_INDEX = np.arange(4).reshape(2, 2)


def _channel_perm(t: int) -> np.ndarray:
    return dihedral_spatial(_OFFSET_INDEX, t).ravel()


def dihedral_transform_packed(raw: RawImage, t: int) -> RawImage:
    """Transforms a packed frame so it stays a canonical packing.

    Equivalent to unpacking to the full mosaic, transforming that grid as a
    plain image, and re-packing: the spatial move plus a channel permutation
    (horizontal flip, for instance, sends (R, G1, G2, B) to (G1, R, B, G2)).
    """
    data = dihedral_spatial(raw.data, t)[:, :, _channel_perm(t)]
    return raw.with_data(data)


def dihedral_transform_rgb(img: RgbImage, t: int) -> RgbImage:
    """Transforms an even-sized RGB image by moving whole 2x2 pixel blocks.

    The within-block layout is preserved, so the implied RGGB phase of the
    pixel grid survives every element; this is the RGB-side action that the
    packed-domain transform mirrors exactly through mosaic sampling.
    """
    d = img.data
    h, w = d.shape[:2]
    if h % 2 or w % 2:
        raise DimensionError("dihedral transform needs even image dimensions")
    blocks = d.reshape(h // 2, 2, w // 2, 2, d.shape[2]).transpose(0, 2, 1, 3, 4)
    blocks = dihedral_spatial(blocks, t)
    nh2, nw2 = blocks.shape[:2]
    out = blocks.transpose(0, 2, 1, 3, 4).reshape(2 * nh2, 2 * nw2, d.shape[2])
    return RgbImage(out)


def _compute_inverses():
    probe = np.arange(24, dtype=np.int64).reshape(2, 3, 4)
    inv = {}
    for t in DIHEDRAL_ELEMENTS:
        a = dihedral_spatial(probe, t)[:, :, _channel_perm(t)]
        for s in DIHEDRAL_ELEMENTS:
            b = dihedral_spatial(a, s)[:, :, _channel_perm(s)]
            if b.shape == probe.shape and np.array_equal(b, probe):
                inv[t] = s
                break
    return inv


DIHEDRAL_INVERSE = _compute_inverses()
