"""Parameter estimation from paired RGB/RAW data.

Two-stage scheme: the per-channel gains and color matrix come from a linear
least-squares fit between linearized RGB and demosaiced normalized RAW; tone
weights come from simplex-constrained projected gradient on the pre-display
values; radial shading from binned gain ratios against frame coordinates.
fit_full alternates the stages until the parameters stop moving.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import dataio, forward, reverse
from .model import (
    GammaCurve,
    IspParams,
    ParamError,
    PipelineError,
    RawImage,
    RgbImage,
    validate_params,
)


class FitError(PipelineError):
    """The supplied data cannot support the requested estimate."""


_MAX_SAMPLES = 60_000   # deterministic stride subsample beyond this
_PGD_ITERS = 2000
_PGD_REL_TOL = 1e-9


# --- loss kinds --------------------------------------------------------------

@dataclass(frozen=True)
class LossKind:
    kind: str            # "l1" | "l2" | "soft"
    delta: float = 0.0   # tolerance half-width for "soft"

    def __post_init__(self):
        if self.kind not in ("l1", "l2", "soft"):
            raise ParamError("loss kind must be l1, l2, or soft")
        if self.kind == "soft" and not (self.delta > 0.0):
            raise ParamError("soft loss needs a positive delta")

    @classmethod
    def l1(cls):
        return cls("l1")

    @classmethod
    def l2(cls):
        return cls("l2")

    @classmethod
    def soft(cls, delta: float):
        return cls("soft", float(delta))

    @classmethod
    def parse(cls, text: str) -> "LossKind":
        if text == "l1":
            return cls.l1()
        if text == "l2":
            return cls.l2()
        if text.startswith("soft:"):
            try:
                return cls.soft(float(text[5:]))
            except ValueError:
                raise ParamError("bad soft loss delta %r" % text[5:]) from None
        raise ParamError("loss must be l1, l2, or soft:DELTA")


def loss(pred: np.ndarray, target: np.ndarray, mask, kind: LossKind) -> float:
    """Masked mean deviation; mask=True samples are excluded."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ParamError("loss operands must share a shape")
    r = pred - target
    if mask is not None:
        keep = ~np.asarray(mask, dtype=bool)
        if keep.shape != r.shape[:keep.ndim]:
            raise ParamError("mask shape does not match the images")
        r = r[keep]
    if r.size == 0:
        raise FitError("no valid pixels")
    if kind.kind == "l1":
        return float(np.mean(np.abs(r)))
    if kind.kind == "l2":
        return float(np.mean(r * r))
    soft = np.maximum(0.0, np.abs(r) - kind.delta)
    return float(np.mean(soft * soft))


# --- masks -------------------------------------------------------------------

def overexposure_mask(rgb: RgbImage, tau: float = 0.98) -> np.ndarray:
    """True where any channel sits at or above tau of full scale."""
    if not (0.0 < tau <= 1.0):
        raise ParamError("tau must lie in (0, 1]")
    return (rgb.normalized() >= tau).any(axis=-1)


# --- batches -----------------------------------------------------------------

@dataclass(frozen=True)
class PairBatch:
    """Aligned (RGB, RAW) patches with optional masks and frame coordinates."""

    pairs: tuple                      # ((RgbImage, RawImage), ...)
    masks: tuple = None               # per-pair (h, w) bool or None
    alignment: str = "aligned"
    offsets: tuple = None             # per-pair (x, y) full-res or None
    frame_shape: tuple = None         # full-frame (h, w), optional

    def __post_init__(self):
        pairs = tuple(self.pairs)
        object.__setattr__(self, "pairs", pairs)
        masks = self.masks if self.masks is not None else (None,) * len(pairs)
        object.__setattr__(self, "masks", tuple(masks))
        offs = self.offsets if self.offsets is not None else (None,) * len(pairs)
        object.__setattr__(self, "offsets", tuple(offs))
        if len(self.masks) != len(pairs) or len(self.offsets) != len(pairs):
            raise ParamError("masks/offsets must match the pair count")
        if self.alignment not in ("aligned", "misaligned"):
            raise ParamError("alignment must be 'aligned' or 'misaligned'")
        for rgb, raw in pairs:
            if (2 * raw.data.shape[0], 2 * raw.data.shape[1]) != rgb.shape:
                raise ParamError("RGB extent must be twice the packed RAW extent")
        if pairs:
            r0 = pairs[0][1]
            for _, raw in pairs[1:]:
                if (raw.black_level, raw.white_level, raw.bit_depth) != \
                        (r0.black_level, r0.white_level, r0.bit_depth):
                    raise ParamError("pairs disagree on radiometric levels")

    @property
    def levels(self):
        raw = self.pairs[0][1]
        return raw.black_level, raw.white_level, raw.bit_depth


def load_pair_batch(manifest, *, split=None, bit_depth: int = 10,
                    black_level: int = 64, white_level: int = 1023) -> PairBatch:
    """Reads every aligned rgb+raw entry of the manifest into memory."""
    pairs, offsets = [], []
    saw_misaligned = False
    for entry in manifest.entries:
        if split is not None and entry.split != split:
            continue
        if entry.rgb_path is None or entry.raw_path is None:
            continue
        if entry.alignment != "aligned":
            saw_misaligned = True
            continue
        rgb = dataio.read_rgb_png(manifest.resolve(entry.rgb_path))
        raw = dataio.load_raw(manifest.resolve(entry.raw_path),
                              bit_depth=bit_depth, black_level=black_level,
                              white_level=white_level, pattern=entry.pattern)
        pairs.append((rgb, raw))
        offsets.append(entry.frame_offset)
    if not pairs:
        if saw_misaligned:
            raise FitError("pixel-wise fitting requires aligned pairs")
        raise FitError("manifest has no usable rgb/raw pairs")
    if any(o is None for o in offsets):
        offsets = None
    return PairBatch(tuple(pairs), alignment="aligned",
                     offsets=tuple(offsets) if offsets else None)


# --- shared linearization helpers --------------------------------------------

def _gamma_inverse(rgb: RgbImage, gamma: GammaCurve) -> np.ndarray:
    v = rgb.normalized()
    if gamma.kind == "srgb":
        return forward.srgb_eotf(v)
    return np.power(v, gamma.exponent)


def _patch_shading(raw: RawImage, offset, frame_shape, shading) -> np.ndarray:
    """Shading gain sampled at this patch's packed coordinates."""
    h2, w2 = raw.packed_shape
    fh2, fw2 = frame_shape[0] // 2, frame_shape[1] // 2
    y0, x0 = offset[1] // 2, offset[0] // 2
    a0, a1, a2 = shading
    ny = (np.arange(y0, y0 + h2) - (fh2 - 1) / 2.0) / max((fh2 - 1) / 2.0, 1e-12)
    nx = (np.arange(x0, x0 + w2) - (fw2 - 1) / 2.0) / max((fw2 - 1) / 2.0, 1e-12)
    r2 = 0.5 * (ny[:, None] ** 2 + nx[None, :] ** 2)
    return a0 + a1 * r2 + a2 * r2 * r2


def _frame_shape(batch: PairBatch):
    if batch.frame_shape is not None:
        return batch.frame_shape
    h = w = 0
    for (_, raw), off in zip(batch.pairs, batch.offsets):
        mh, mw = raw.mosaic_shape
        h = max(h, off[1] + mh)
        w = max(w, off[0] + mw)
    return (h, w)


def _normalized_raw(raw: RawImage) -> np.ndarray:
    rng = raw.white_level - raw.black_level
    return np.clip((raw.data.astype(np.float64) - raw.black_level) / rng, 0.0, 1.0)


def _gather(batch: PairBatch, extra_mask_fn, *, gamma: GammaCurve,
            shading=None):
    """Per-pixel (demosaiced RAW, linearized RGB) rows over unmasked pixels."""
    ds, ys = [], []
    frame = _frame_shape(batch) if shading is not None else None
    for k, (rgb, raw) in enumerate(batch.pairs):
        d4 = _normalized_raw(raw)
        if shading is not None:
            d4 = d4 * _patch_shading(raw, batch.offsets[k], frame, shading)[:, :, None]
        d = forward.demosaic_bilinear(d4)
        y = _gamma_inverse(rgb, gamma)
        keep = np.ones(rgb.shape, dtype=bool)
        if batch.masks[k] is not None:
            keep &= ~batch.masks[k]
        m = extra_mask_fn(rgb)
        if m is not None:
            keep &= ~m
        ds.append(d[keep])
        ys.append(y[keep])
    d = np.concatenate(ds, axis=0)
    y = np.concatenate(ys, axis=0)
    if d.shape[0] > _MAX_SAMPLES:
        step = -(-d.shape[0] // _MAX_SAMPLES)
        d, y = d[::step], y[::step]
    return d, y


# --- linear color ------------------------------------------------------------

def fit_linear_color(batch: PairBatch, mask=None, *,
                     gamma: GammaCurve = None, tone_weights=None,
                     shading=None):
    """Least-squares gains + row-normalized color matrix.

    mask: extra (h, w) exclusion applied to every pair, or a callable
    rgb -> mask (the overexposure hook).  tone_weights, when given, are
    inverted out of the RGB targets (the refinement pass).  Returns
    (wb_gains, ccm, rmse).
    """
    gamma = gamma or GammaCurve.srgb()
    mask_fn = mask if callable(mask) else (lambda rgb: mask)
    d, y = _gather(batch, mask_fn, gamma=gamma, shading=shading)
    if tone_weights is not None:
        y = forward.tone_inverse(y, tone_weights)
    if d.shape[0] < 1000:
        raise FitError("fewer than 1000 unclipped correspondences (%d)"
                       % d.shape[0])
    sol, _, rank, sv = np.linalg.lstsq(d, y, rcond=None)
    if rank < 3 or sv[-1] / sv[0] < 1e-10:
        raise FitError("degenerate color data")
    lin = sol.T                                   # y ≈ lin @ d
    u = np.linalg.solve(lin, np.ones(3))          # row sums of lin/diag(g) = 1
    if np.any(np.abs(u) < 1e-12):
        raise FitError("degenerate color data")
    gains = 1.0 / u
    ccm = lin * u[None, :]
    resid = d @ lin.T - y
    rmse = float(np.sqrt(np.mean(resid * resid)))
    return tuple(float(g) for g in gains), ccm, rmse


# --- tone weights ------------------------------------------------------------

def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, v.size + 1)
    cond = u - css / ks > 0
    rho = ks[cond][-1]
    theta = css[rho - 1] / rho
    return np.maximum(v - theta, 0.0)


def _tone_design(u: np.ndarray, basis) -> np.ndarray:
    return np.stack([ck(u) for ck in basis], axis=1)


def _loss_grad(C, w, t, kind: LossKind):
    r = C @ w - t
    n = r.size
    if kind.kind == "l2":
        return float(np.mean(r * r)), 2.0 / n * (C.T @ r)
    if kind.kind == "l1":
        return float(np.mean(np.abs(r))), 1.0 / n * (C.T @ np.sign(r))
    s = np.maximum(0.0, np.abs(r) - kind.delta)
    return float(np.mean(s * s)), 2.0 / n * (C.T @ (np.sign(r) * s))


def fit_tone_weights(batch: PairBatch, fixed, mask=None, *,
                     loss_kind: LossKind = None, gamma: GammaCurve = None,
                     shading=None, basis=None):
    """Simplex-constrained weights for the fixed monotone basis.

    fixed = (wb_gains, ccm) from the linear stage.  Projected gradient with
    Euclidean simplex projection, warm-started from the sum-one least-squares
    solution; stops after 2000 iterations or relative improvement < 1e-9.
    Returns (weights, rmse).
    """
    gains, ccm = fixed
    loss_kind = loss_kind or LossKind.l2()
    gamma = gamma or GammaCurve.srgb()
    basis = basis or forward.TONE_BASIS
    K = len(basis)
    if K == 1:
        return (1.0,), 0.0
    mask_fn = mask if callable(mask) else (lambda rgb: mask)
    d, y = _gather(batch, mask_fn, gamma=gamma, shading=shading)
    if d.shape[0] == 0:
        raise FitError("no valid pixels")
    u = d * np.asarray(gains)
    u = np.clip(u @ np.asarray(ccm).T, 0.0, 1.0).ravel()
    t = y.ravel()
    C = _tone_design(u, basis)

    # warm start: least squares on the sum-to-one affine slice, projected
    G = C.T @ C
    b = C.T @ t
    kkt = np.zeros((K + 1, K + 1))
    kkt[:K, :K] = 2.0 * G
    kkt[:K, K] = 1.0
    kkt[K, :K] = 1.0
    rhs = np.concatenate([2.0 * b, [1.0]])
    try:
        w = np.linalg.solve(kkt, rhs)[:K]
    except np.linalg.LinAlgError:
        w = np.full(K, 1.0 / K)
    w = project_simplex(w)

    f, g = _loss_grad(C, w, t, loss_kind)
    lip = 2.0 * float(np.linalg.eigvalsh(G).max()) / t.size
    step = 1.0 / max(lip, 1e-12)
    iters = 0
    for iters in range(1, _PGD_ITERS + 1):
        cand = project_simplex(w - step * g)
        fc, gc = _loss_grad(C, cand, t, loss_kind)
        if fc > f:
            step *= 0.5
            if step * max(lip, 1e-12) < 1e-6:
                break
            continue
        drop = f - fc
        w, f, g = cand, fc, gc
        if drop <= _PGD_REL_TOL * max(f, 1e-30):
            break
    w = project_simplex(w)
    r = C @ w - t
    rmse = float(np.sqrt(np.mean(r * r)))
    return tuple(float(x) for x in w), rmse


# --- shading -----------------------------------------------------------------

_SHADING_BINS = 32


def fit_shading(batch: PairBatch, fixed, mask=None, *,
                gamma: GammaCurve = None):
    """Radial gain polynomial from per-site prediction/observation ratios.

    fixed = (wb_gains, ccm, tone_weights).  Patches must carry frame offsets;
    the gain at each packed site is predicted-RAW / observed-RAW, averaged in
    32 radius bins, then weighted least squares on (1, r^2, r^4) with
    nonnegative curvature enforced by clamp-and-refit.  Returns
    ((a0, a1, a2), rmse).
    """
    gains, ccm, tone_weights = fixed
    gamma = gamma or GammaCurve.srgb()
    if any(o is None for o in batch.offsets):
        raise FitError("shading requires full-frame coordinates")
    mask_fn = mask if callable(mask) else (lambda rgb: mask)
    frame = _frame_shape(batch)
    minv = np.linalg.inv(np.asarray(ccm))
    g4 = np.array([gains[0], gains[1], gains[1], gains[2]])

    r2s, preds, obss = [], [], []
    for k, (rgb, raw) in enumerate(batch.pairs):
        y = _gamma_inverse(rgb, gamma)
        y = forward.tone_inverse(y, tone_weights)
        v4 = reverse.mosaic_rggb(y @ minv.T) / g4    # post-shading estimate
        obs = _normalized_raw(raw)
        keep2 = np.ones(rgb.shape, dtype=bool)
        if batch.masks[k] is not None:
            keep2 &= ~batch.masks[k]
        m = mask_fn(rgb)
        if m is not None:
            keep2 &= ~m
        keep4 = np.stack([keep2[0::2, 0::2], keep2[0::2, 1::2],
                          keep2[1::2, 0::2], keep2[1::2, 1::2]], axis=-1)
        keep4 &= (obs > 0.02) & (v4 > 0.02)          # ratio needs signal
        h2, w2 = raw.packed_shape
        fh2, fw2 = frame[0] // 2, frame[1] // 2
        y0, x0 = batch.offsets[k][1] // 2, batch.offsets[k][0] // 2
        ny = (np.arange(y0, y0 + h2) - (fh2 - 1) / 2.0) / max((fh2 - 1) / 2.0, 1e-12)
        nx = (np.arange(x0, x0 + w2) - (fw2 - 1) / 2.0) / max((fw2 - 1) / 2.0, 1e-12)
        r2 = 0.5 * (ny[:, None] ** 2 + nx[None, :] ** 2)
        r2 = np.broadcast_to(r2[:, :, None], keep4.shape)
        r2s.append(r2[keep4])
        preds.append(v4[keep4])
        obss.append(obs[keep4])
    r2 = np.concatenate(r2s)
    pred = np.concatenate(preds)
    obs = np.concatenate(obss)
    if r2.size == 0:
        raise FitError("no valid pixels")

    edges = np.linspace(0.0, 1.0, _SHADING_BINS + 1)
    idx = np.clip(np.digitize(r2, edges) - 1, 0, _SHADING_BINS - 1)
    counts = np.bincount(idx, minlength=_SHADING_BINS).astype(np.float64)
    used = counts > 0
    mean_pred = np.bincount(idx, weights=pred, minlength=_SHADING_BINS)[used] \
        / counts[used]
    mean_obs = np.bincount(idx, weights=obs, minlength=_SHADING_BINS)[used] \
        / counts[used]
    mean_u = np.bincount(idx, weights=r2, minlength=_SHADING_BINS)[used] \
        / counts[used]
    gain = mean_pred / mean_obs
    wts = np.sqrt(counts[used])

    def wlsq(cols):
        A = np.stack(cols, axis=1) * wts[:, None]
        coef, _, _, _ = np.linalg.lstsq(A, gain * wts, rcond=None)
        return coef

    ones = np.ones_like(mean_u)
    a0, a1, a2 = wlsq([ones, mean_u, mean_u ** 2])
    if a1 < 0.0 or a2 < 0.0:
        if a2 < 0.0 and a1 >= 0.0:
            a0, a1 = wlsq([ones, mean_u])
            a2 = 0.0
        elif a1 < 0.0 and a2 >= 0.0:
            a0, a2 = wlsq([ones, mean_u ** 2])
            a1 = 0.0
        if a1 < 0.0 or a2 < 0.0:
            (a0,) = wlsq([ones])
            a1 = a2 = 0.0
    a0 = max(float(a0), 1.0)
    shading = (a0, float(a1), float(a2))
    fitg = a0 + a1 * mean_u + a2 * mean_u ** 2
    rmse = float(np.sqrt(np.mean((fitg - gain) ** 2)))
    return shading, rmse


# --- histogram matching ------------------------------------------------------

def histogram_match(src: RgbImage, ref: RgbImage) -> RgbImage:
    """Per-channel monotone remap of src so its 256-bin CDF tracks ref's."""
    s = src.stored()
    r = ref.stored()
    out = np.empty_like(s)
    for c in range(3):
        hs = np.bincount(s[:, :, c].ravel(), minlength=256)
        hr = np.bincount(r[:, :, c].ravel(), minlength=256)
        cs = np.cumsum(hs) / s[:, :, c].size
        cr = np.cumsum(hr) / r[:, :, c].size
        lut = np.searchsorted(cr, cs, side="left").clip(0, 255).astype(np.uint8)
        out[:, :, c] = lut[s[:, :, c]]
    return RgbImage(out)


# --- full orchestration ------------------------------------------------------

@dataclass(frozen=True)
class FitConfig:
    tau: float = 0.98
    loss: LossKind = dc_field(default_factory=LossKind.l2)
    gamma: GammaCurve = dc_field(default_factory=GammaCurve.srgb)
    max_rounds: int = 40
    tol: float = 1e-6


@dataclass(frozen=True)
class FitReport:
    params: IspParams
    residuals: dict          # stage name -> RMSE
    iterations: int          # alternation rounds used
    excluded_fraction: float

    def to_dict(self) -> dict:
        return {
            "residuals": {k: float(v) for k, v in self.residuals.items()},
            "iterations": self.iterations,
            "excluded_fraction": self.excluded_fraction,
        }


def _encode_state(gains, ccm, tone, shading):
    return np.concatenate([gains, np.asarray(ccm).ravel(), tone, shading])


def _decode_state(x):
    gains = tuple(np.maximum(x[0:3], 1e-3))
    ccm = x[3:12].reshape(3, 3).copy()
    sums = ccm.sum(axis=1, keepdims=True)
    if np.any(np.abs(sums) < 1e-6):
        raise FitError("degenerate color data")
    ccm = ccm / sums
    tone = tuple(project_simplex(x[12:16]))
    shading = (max(float(x[16]), 1.0), max(float(x[17]), 0.0),
               max(float(x[18]), 0.0))
    return gains, ccm, tone, shading


def fit_full(batch: PairBatch, config: FitConfig = None) -> FitReport:
    """Estimates the complete parameter set by stage alternation.

    Mask -> linear color -> tone -> shading (when offsets exist) -> linear
    again with the fitted tone inverted out, then further alternation rounds
    with secant (Anderson) extrapolation across rounds until no parameter
    moves more than config.tol.  The extrapolation only combines outputs of
    the exact per-stage solvers, so every iterate keeps the two-stage
    structure; it is what pushes the slowly-contracting linear<->tone
    coordinate descent all the way to its fixed point.
    """
    config = config or FitConfig()
    if not batch.pairs:
        raise FitError("empty batch")
    if batch.alignment != "aligned":
        raise FitError("pixel-wise fitting requires aligned pairs")
    black, white, bits = batch.levels

    def ox(rgb):
        return overexposure_mask(rgb, config.tau)

    total = sum(rgb.shape[0] * rgb.shape[1] for rgb, _ in batch.pairs)
    excluded = 0
    for k, (rgb, _) in enumerate(batch.pairs):
        m = ox(rgb)
        if batch.masks[k] is not None:
            m = m | batch.masks[k]
        excluded += int(m.sum())

    have_offsets = bool(batch.offsets) and \
        all(o is not None for o in batch.offsets)
    residuals = {}

    def one_round(tone, shading):
        gains, ccm, res_lin = fit_linear_color(
            batch, ox, gamma=config.gamma, tone_weights=tone,
            shading=shading if have_offsets else None)
        tone, res_tone = fit_tone_weights(
            batch, (gains, ccm), ox, loss_kind=config.loss, gamma=config.gamma,
            shading=shading if have_offsets else None)
        if have_offsets:
            shading, res_sh = fit_shading(batch, (gains, ccm, tone), ox,
                                          gamma=config.gamma)
            # a0 trades freely against a global gain scale; pin a0 = 1 so the
            # alternation has a unique fixed point (the linear stage re-derives
            # the gains from data each round).
            a0 = shading[0]
            shading = (1.0, shading[1] / a0, shading[2] / a0)
            residuals["shading"] = res_sh
        residuals["linear"] = res_lin
        residuals["tone"] = res_tone
        return gains, ccm, tone, shading

    # round 1: plain linear (no tone knowledge) -> tone -> shading
    state = one_round(None, (1.0, 0.0, 0.0))
    x = _encode_state(*state)
    hist_x, hist_f = [], []
    rounds = 1
    for rounds in range(2, config.max_rounds + 1):
        state = one_round(state[2], state[3])
        fx = _encode_state(*state)
        f = fx - x
        if np.max(np.abs(f)) < config.tol:
            break
        hist_x.append(fx)
        hist_f.append(f)
        if len(hist_f) > 4:
            hist_x.pop(0)
            hist_f.pop(0)
        x = fx
        if len(hist_f) >= 2:
            F = np.stack(hist_f, axis=1)
            ones = np.ones(F.shape[1])
            try:
                G = F.T @ F + 1e-14 * np.eye(F.shape[1])
                lam = np.linalg.solve(G, ones)
                alpha = lam / lam.sum()
                x_try = np.stack(hist_x, axis=1) @ alpha
                state_try = _decode_state(x_try)
                validate_params(IspParams(
                    black_level=black, white_level=white, bit_depth=bits,
                    wb_gains=state_try[0], ccm=state_try[1],
                    tone_weights=state_try[2], gamma=config.gamma,
                    shading=state_try[3]))
                state = state_try
                x = _encode_state(*state)
            except (np.linalg.LinAlgError, PipelineError):
                pass

    gains, ccm, tone, shading = state
    params = IspParams(
        black_level=black, white_level=white, bit_depth=bits,
        wb_gains=gains, ccm=ccm, tone_weights=tone, gamma=config.gamma,
        shading=shading)
    validate_params(params)
    return FitReport(params=params, residuals=residuals, iterations=rounds,
                     excluded_fraction=excluded / max(total, 1))
