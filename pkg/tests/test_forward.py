import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rawkit.forward import (
    TONE_BASIS,
    TONE_BASIS_NAMES,
    apply_ccm,
    apply_gamma,
    apply_shading_gain,
    apply_tone_curve,
    apply_wb,
    demosaic_bilinear,
    normalize_black_white,
    quantize_rgb8,
    render_quicklook,
    run_forward,
    shading_field,
    srgb_eotf,
    srgb_oetf,
    tone_forward,
    tone_inverse,
)
from rawkit.model import (
    BayerPattern,
    GammaCurve,
    IspParams,
    ParamError,
    RawImage,
)

from conftest import make_raw


def const_raw(dn, h2=4, w2=4, **kw):
    return RawImage(np.full((h2, w2, 4), dn, dtype=np.uint16), **kw)


def params(**kw):
    base = dict(
        black_level=64, white_level=1023, bit_depth=10,
        wb_gains=(1.0, 1.0, 1.0), ccm=np.eye(3),
        tone_weights=(1.0, 0.0, 0.0, 0.0), gamma=GammaCurve.srgb(),
        shading=(1.0, 0.0, 0.0),
    )
    base.update(kw)
    return IspParams(**base)


# --- normalize ---------------------------------------------------------------

def test_normalize_endpoints():
    p = params()
    img, mask = normalize_black_white(const_raw(64), p)
    assert np.all(img == 0.0) and not mask.any()
    img, mask = normalize_black_white(const_raw(1023), p)
    assert np.all(img == 1.0) and mask.all()


def test_normalize_midpoint_value():
    img, _ = normalize_black_white(const_raw(544), params())
    assert img[0, 0, 0] == pytest.approx((544 - 64) / 959, abs=1e-15)
    assert img[0, 0, 0] == pytest.approx(0.500521, abs=1e-6)


def test_normalize_clips_below_black():
    img, mask = normalize_black_white(const_raw(10), params())
    assert np.all(img == 0.0) and not mask.any()


def test_normalize_rejects_inverted_levels():
    p = params()
    object.__setattr__(p, "white_level", 64)
    with pytest.raises(ParamError):
        normalize_black_white(const_raw(100), p)


# --- shading -----------------------------------------------------------------

def test_shading_unit_gain_is_identity(rng):
    img = rng.random((6, 8, 4))
    out = apply_shading_gain(img, params(shading=(1.0, 0.0, 0.0)), "forward")
    assert np.array_equal(out, img)


def test_shading_center_and_corner():
    p = params(shading=(1.0, 0.5, 0.25))
    img = np.full((5, 5, 4), 0.4)
    out = apply_shading_gain(img, p, "forward")
    assert out[2, 2, 0] == pytest.approx(0.4 * 1.0, abs=1e-15)   # r = 0
    assert out[0, 0, 0] == pytest.approx(0.7, abs=1e-12)          # r = 1
    assert out[4, 4, 0] == pytest.approx(0.7, abs=1e-12)


def test_shading_field_corner_radius():
    g = shading_field((7, 9), (1.0, 1.0, 0.0))
    assert g[0, 0] == pytest.approx(2.0, abs=1e-12)
    assert g[3, 4] == pytest.approx(1.0, abs=1e-15)
    # degenerate one-row image: no vertical extent
    g1 = shading_field((1, 5), (1.0, 1.0, 0.0))
    assert g1[0, 0] == pytest.approx(1.5, abs=1e-12)


def test_shading_roundtrip(rng):
    p = params(shading=(1.1, 0.3, 0.2))
    img = rng.random((6, 8, 4))
    back = apply_shading_gain(apply_shading_gain(img, p, "forward"), p, "inverse")
    assert np.allclose(back, img, rtol=1e-12, atol=0)


# --- white balance -----------------------------------------------------------

def test_wb_identity(rng):
    img = rng.random((4, 4, 4))
    out, mask = apply_wb(img, params(), "forward", np.zeros((4, 4, 4), bool))
    assert np.array_equal(out, img) and not mask.any()


def test_wb_channel_gains():
    p = params(wb_gains=(2.0, 1.0, 1.5))
    img = np.array([[[0.1, 0.2, 0.2, 0.2]]])
    out, _ = apply_wb(img, p, "forward")
    assert np.allclose(out[0, 0], [0.2, 0.2, 0.2, 0.3], atol=1e-15)


def test_wb_clamp_extends_mask():
    p = params(wb_gains=(2.0, 1.0, 1.0))
    img = np.zeros((1, 1, 4))
    img[0, 0] = [0.8, 0.5, 0.5, 0.5]
    out, mask = apply_wb(img, p, "forward", np.zeros((1, 1, 4), bool))
    assert out[0, 0, 0] == 1.0
    assert mask[0, 0, 0] and not mask[0, 0, 1:].any()


def test_wb_inverse_divides_without_clamp(rng):
    p = params(wb_gains=(2.0, 1.0, 1.5))
    img = rng.random((4, 4, 4))
    fwd, _ = apply_wb(img, p, "forward")
    unclipped = img * p.wb_gains4() <= 1.0
    back, _ = apply_wb(fwd, p, "inverse")
    assert np.allclose(back[unclipped], img[unclipped], rtol=1e-12)


# --- demosaic ----------------------------------------------------------------

def test_demosaic_constant():
    out = demosaic_bilinear(np.full((3, 3, 4), 0.25))
    assert out.shape == (6, 6, 3)
    assert np.allclose(out, 0.25, atol=1e-12)


def test_demosaic_single_block_planes():
    raw4 = np.array([[[0.5, 0.25, 0.75, 0.125]]])
    out = demosaic_bilinear(raw4)
    assert out.shape == (2, 2, 3)
    assert np.allclose(out[:, :, 0], 0.5, atol=1e-12)
    assert np.allclose(out[:, :, 2], 0.125, atol=1e-12)


def test_demosaic_constant_red_plane(rng):
    raw4 = rng.random((2, 2, 4))
    raw4[:, :, 0] = 0.5
    out = demosaic_bilinear(raw4)
    assert out.shape == (4, 4, 3)
    assert np.allclose(out[:, :, 0], 0.5, atol=1e-12)


@given(hnp.arrays(np.float64, (4, 4, 4), elements=st.floats(0, 1)))
@settings(max_examples=100, deadline=None)
def test_demosaic_preserves_sample_sites(raw4):
    out = demosaic_bilinear(raw4)
    assert np.array_equal(out[0::2, 0::2, 0], raw4[:, :, 0])
    assert np.array_equal(out[0::2, 1::2, 1], raw4[:, :, 1])
    assert np.array_equal(out[1::2, 0::2, 1], raw4[:, :, 2])
    assert np.array_equal(out[1::2, 1::2, 2], raw4[:, :, 3])


def test_demosaic_interpolates_between_samples():
    # two red columns 0 and 1: the red value midway is their average
    raw4 = np.zeros((2, 2, 4))
    raw4[:, 0, 0] = 0.0
    raw4[:, 1, 0] = 1.0
    out = demosaic_bilinear(raw4)
    assert out[0, 1, 0] == pytest.approx(0.5, abs=1e-12)


# --- color matrix ------------------------------------------------------------

def test_ccm_identity(rng):
    img = rng.random((4, 4, 3))
    out, _ = apply_ccm(img, params(), "forward")
    assert np.allclose(out, img, atol=1e-15)


def test_ccm_row_sums_preserve_gray():
    m = np.array([[1.6, -0.4, -0.2], [-0.3, 1.5, -0.2], [0.0, -0.4, 1.4]])
    out, _ = apply_ccm(np.full((2, 2, 3), 0.5), params(ccm=m), "forward")
    assert np.allclose(out, 0.5, atol=1e-12)


def test_ccm_known_product():
    m = np.array([[1.6, -0.4, -0.2], [-0.3, 1.5, -0.2], [0.0, -0.4, 1.4]])
    img = np.array([[[0.2, 0.4, 0.6]]])
    out, _ = apply_ccm(img, params(ccm=m), "forward")
    assert np.allclose(out[0, 0], [0.04, 0.42, 0.68], atol=1e-12)


def test_ccm_forward_clamps_and_masks():
    m = np.array([[1.6, -0.4, -0.2], [-0.3, 1.5, -0.2], [0.0, -0.4, 1.4]])
    img = np.array([[[1.0, 0.0, 0.0]], [[0.2, 0.4, 0.6]]])
    out, mask = apply_ccm(img, params(ccm=m), "forward",
                          np.zeros((2, 1), bool))
    assert out[0, 0, 1] == 0.0  # -0.3 clamped
    assert mask[0, 0] and not mask[1, 0]


def test_ccm_inverse_no_clamp(rng):
    m = np.array([[1.6, -0.4, -0.2], [-0.3, 1.5, -0.2], [0.0, -0.4, 1.4]])
    p = params(ccm=m)
    img = 0.4 + 0.1 * (rng.random((4, 4, 3)) - 0.5)  # near gray: no clamping
    fwd, _ = apply_ccm(img, p, "forward")
    back, _ = apply_ccm(fwd, p, "inverse")
    assert np.allclose(back, img, atol=1e-12)
    inv, _ = apply_ccm(np.full((1, 1, 3), 1.2), p, "inverse")
    assert np.allclose(inv, 1.2, atol=1e-12)  # inverse never clamps to [0,1]


# --- tone curve --------------------------------------------------------------

def test_tone_basis_shapes():
    assert len(TONE_BASIS) == len(TONE_BASIS_NAMES) == 4
    x = np.linspace(0, 1, 11)
    for ck in TONE_BASIS:
        y = ck(x)
        assert y[0] == pytest.approx(0.0, abs=1e-15)
        assert y[-1] == pytest.approx(1.0, abs=1e-15)
        assert np.all(np.diff(y) > 0)


def test_tone_identity_weights(rng):
    img = rng.random((4, 4, 3))
    out = apply_tone_curve(img, params(), "forward")
    assert np.allclose(out, img, atol=1e-15)


def test_tone_smoothstep_midpoint():
    p = params(tone_weights=(0.0, 1.0, 0.0, 0.0))
    out = apply_tone_curve(np.array([0.5]), p, "forward")
    assert out[0] == pytest.approx(0.5, abs=1e-15)


def test_tone_inverse_bisection_grid():
    p = params(tone_weights=(0.3, 0.3, 0.2, 0.2))
    x = np.arange(0.1, 0.95, 0.1)
    y = apply_tone_curve(x, p, "forward")
    back = apply_tone_curve(y, p, "inverse")
    assert np.allclose(back, x, atol=1e-6)


def test_tone_inverse_residual_bound(rng):
    # |t(inverse(y)) - y| <= 1e-7 including the steep sqrt member near 0
    p = params(tone_weights=(0.0, 0.0, 0.0, 1.0))
    y = np.concatenate([[0.0, 1e-9, 1e-6, 1.0], rng.random(50)])
    x = tone_inverse(y, p.tone_weights)
    assert np.max(np.abs(tone_forward(x, p.tone_weights) - y)) <= 1e-7


@given(st.lists(st.floats(0.01, 1), min_size=4, max_size=4))
@settings(max_examples=100, deadline=None)
def test_tone_monotone_for_random_simplex_weights(ws):
    w = np.array(ws) / np.sum(ws)
    x = np.arange(0.0, 1.0 + 1e-9, 1e-3)
    y = tone_forward(x, tuple(w))
    assert np.all(np.diff(y) > 0)
    assert y[0] == pytest.approx(0.0, abs=1e-12)
    assert y[-1] == pytest.approx(1.0, abs=1e-12)


def test_tone_rejects_wrong_arity():
    p = params()
    object.__setattr__(p, "tone_weights", (1.0, 0.0))
    with pytest.raises(ParamError):
        apply_tone_curve(np.array([0.5]), p, "forward")


# --- gamma -------------------------------------------------------------------

def test_gamma_endpoints():
    p = params()
    for v, want in ((0.0, 0.0), (1.0, 1.0)):
        assert apply_gamma(np.array([v]), p, "forward")[0] == pytest.approx(want, abs=1e-12)


def test_gamma_srgb_value():
    out = apply_gamma(np.array([0.2]), params(), "forward")
    assert out[0] == pytest.approx(0.4845, abs=1e-4)


def test_gamma_srgb_linear_segment():
    assert srgb_oetf(np.array([0.001]))[0] == pytest.approx(0.01292, abs=1e-12)
    assert srgb_eotf(np.array([0.01292]))[0] == pytest.approx(0.001, abs=1e-12)


def test_gamma_closed_form_roundtrip():
    p = params()
    x = np.array([0.0, 0.001, 0.0031308, 0.5, 1.0])
    back = apply_gamma(apply_gamma(x, p, "forward"), p, "inverse")
    assert np.allclose(back, x, atol=1e-12)


def test_gamma_power_law():
    p = params(gamma=GammaCurve.power(2.2))
    x = np.array([0.25, 0.5])
    fwd = apply_gamma(x, p, "forward")
    assert np.allclose(fwd, x ** (1 / 2.2), atol=1e-15)
    assert np.allclose(apply_gamma(fwd, p, "inverse"), x, atol=1e-12)


def test_stage_rejects_bad_direction(rng):
    with pytest.raises(ParamError):
        apply_gamma(rng.random(3), params(), "backward")


# --- quantize ----------------------------------------------------------------

def test_quantize_values():
    img = np.array([[[0.0, 1.0, 0.5]], [[0.2, 0.999, 2.0]]])
    out = quantize_rgb8(img)
    assert out.is_stored
    assert tuple(out.data[0, 0]) == (0, 255, 128)
    assert out.data[1, 0, 0] == 51
    assert out.data[1, 0, 2] == 255  # clamped before rounding


# --- full chain --------------------------------------------------------------

def test_run_forward_mid_gray():
    rgb, mask = run_forward(const_raw(544), IspParams.identity())
    assert rgb.data.shape == (8, 8, 3)
    assert np.all(rgb.data == 188)
    assert not mask.any()


def test_run_forward_black_and_saturated():
    rgb, mask = run_forward(const_raw(64), IspParams.identity())
    assert np.all(rgb.data == 0) and not mask.any()
    rgb, mask = run_forward(const_raw(1023), IspParams.identity())
    assert np.all(rgb.data == 255) and mask.all()


def test_run_forward_trace_order():
    rgb, mask, tr = run_forward(const_raw(300), IspParams.identity(), trace=True)
    assert tr.names() == ["normalize", "shading", "wb", "demosaic", "ccm",
                          "tone", "gamma", "quantize"]
    assert tr.entries[-1][1] is rgb.data


def test_run_forward_unquantized():
    rgb, _ = run_forward(const_raw(544), IspParams.identity(), quantize=False)
    assert not rgb.is_stored
    assert rgb.data[0, 0, 0] == pytest.approx(srgb_oetf(np.array([480 / 959]))[0],
                                              abs=1e-12)


def test_run_forward_deterministic(rng):
    raw = make_raw(rng)
    p = params(wb_gains=(2.0, 1.0, 1.5), tone_weights=(0.4, 0.3, 0.2, 0.1),
               shading=(1.0, 0.2, 0.1))
    a, am = run_forward(raw, p)
    b, bm = run_forward(raw, p)
    assert np.array_equal(a.data, b.data) and np.array_equal(am, bm)


def test_run_forward_mask_grows_with_kernel(rng):
    # one saturated sample taints its demosaic neighborhood, not the whole frame
    data = np.full((4, 4, 4), 300, dtype=np.uint16)
    data[1, 1, 0] = 1023
    rgb, mask = run_forward(RawImage(data), IspParams.identity())
    assert mask[2, 2]          # the saturated R site itself
    assert mask[1, 1] and mask[3, 3]
    assert not mask[6, 6] and not mask[0, 6]
    assert mask.sum() <= 9


# --- quicklook ---------------------------------------------------------------

def test_quicklook_constant_gray():
    out = render_quicklook(const_raw(544, h2=3, w2=5))
    assert out.shape == (3, 5)
    assert out.is_stored
    assert len(np.unique(out.data)) == 1


def test_quicklook_green_average():
    from rawkit.model import round_half_away

    data = np.zeros((2, 2, 4), dtype=np.uint16)
    data[:, :, 1] = 64 + 400
    data[:, :, 2] = 64 + 200
    ql = render_quicklook(RawImage(data))
    v = 0.5 * (400 + 200) / 959          # greens averaged before tone mapping
    v = v * v * (3 - 2 * v)
    want = int(round_half_away(np.array([255 * srgb_oetf(np.array([v]))[0]]))[0])
    assert int(ql.data[0, 0, 1]) == want
    assert np.all(ql.data[:, :, 0] == 0) and np.all(ql.data[:, :, 2] == 0)
