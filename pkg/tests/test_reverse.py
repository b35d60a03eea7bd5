import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rawkit import dataio
from rawkit.dataio import SceneSpec, generate_scene
from rawkit.forward import demosaic_bilinear, run_forward
from rawkit.model import (
    DIHEDRAL_ELEMENTS,
    BayerPattern,
    DimensionError,
    IspParams,
    ParamError,
    RawImage,
    RgbImage,
    dihedral_spatial,
    dihedral_transform_rgb,
)
from rawkit.reverse import (
    ReverseOptions,
    mosaic_rggb,
    quantize_raw,
    run_reverse,
    unprocess_batch,
)


def psnr_dn(a, b, keep=None):
    d = a.astype(np.float64) - b.astype(np.float64)
    if keep is not None:
        d = d[keep]
    mse = np.mean((d / 959.0) ** 2)
    return 100.0 if mse == 0 else -10.0 * np.log10(mse)


# --- options -----------------------------------------------------------------

def test_options_validation():
    ReverseOptions()
    with pytest.raises(ParamError):
        ReverseOptions(output_bit_depth=11)
    with pytest.raises(ParamError):
        ReverseOptions(clip_policy="ignore")


# --- mosaic ------------------------------------------------------------------

def test_mosaic_constant():
    out = mosaic_rggb(np.full((4, 6, 3), 0.3))
    assert out.shape == (2, 3, 4)
    assert np.all(out == 0.3)


def test_mosaic_block_sampling():
    img = np.arange(2 * 2 * 3, dtype=np.float64).reshape(2, 2, 3)
    out = mosaic_rggb(img)
    # (R of p00, G of p01, G of p10, B of p11)
    assert tuple(out[0, 0]) == (img[0, 0, 0], img[0, 1, 1],
                                img[1, 0, 1], img[1, 1, 2])


def test_mosaic_rejects_odd():
    with pytest.raises(DimensionError):
        mosaic_rggb(np.zeros((3, 4, 3)))


@given(hnp.arrays(np.float64, (5, 7, 4), elements=st.floats(0, 1)))
@settings(max_examples=50, deadline=None)
def test_mosaic_inverts_demosaic(x):
    assert np.array_equal(mosaic_rggb(demosaic_bilinear(x)), x)


# --- DN quantize -------------------------------------------------------------

def test_quantize_raw_endpoints():
    p = IspParams.identity()
    assert quantize_raw(np.zeros((2, 2, 4)), p).data[0, 0, 0] == 64
    assert quantize_raw(np.ones((2, 2, 4)), p).data[0, 0, 0] == 1023
    assert quantize_raw(np.full((2, 2, 4), 0.5), p).data[0, 0, 0] == 544


def test_quantize_raw_clips_to_range():
    p = IspParams.identity()
    lo = quantize_raw(np.full((2, 2, 4), -0.5), p)
    assert np.all(lo.data == 0)
    hi = quantize_raw(np.full((2, 2, 4), 1.2), p)
    assert np.all(hi.data == 1023)  # 64 + 1.2*959 > 1023


def test_quantize_raw_respects_bit_depth():
    p = IspParams.identity(bit_depth=12, white_level=4095)
    out = quantize_raw(np.ones((2, 2, 4)), p,
                       ReverseOptions(output_bit_depth=12))
    assert out.bit_depth == 12
    assert np.all(out.data == 4095)


def test_quantize_raw_dither(rng):
    p = IspParams.identity()
    v = rng.random((16, 16, 4)) * 0.9
    base = quantize_raw(v, p)
    d1 = quantize_raw(v, p, ReverseOptions(dither=True, dither_seed=5))
    d2 = quantize_raw(v, p, ReverseOptions(dither=True, dither_seed=5))
    d3 = quantize_raw(v, p, ReverseOptions(dither=True, dither_seed=6))
    assert np.array_equal(d1.data, d2.data)          # seeded determinism
    assert not np.array_equal(d1.data, d3.data)
    assert np.abs(d1.data.astype(int) - base.data.astype(int)).max() <= 1


# --- full reverse ------------------------------------------------------------

def test_reverse_all_zero_hits_black_level():
    p = dataio.default_params()
    raw, mask = run_reverse(RgbImage(np.zeros((8, 8, 3), np.uint8)), p)
    assert np.all(raw.data == p.black_level)
    assert not mask.any()
    assert raw.data.shape == (4, 4, 4)


def test_reverse_all_255_saturates_and_masks():
    p = dataio.default_params()
    raw, mask = run_reverse(RgbImage(np.full((8, 8, 3), 255, np.uint8)), p)
    assert np.all(raw.data == p.white_level)
    assert mask.all()


def test_reverse_partial_saturation_masks_sites():
    p = dataio.default_params()
    img = np.full((4, 4, 3), 128, np.uint8)
    img[0, 1, 2] = 255  # G1 site of block (0,0)
    raw, mask = run_reverse(RgbImage(img), p)
    assert mask[0, 0, 1] and mask.sum() == 1
    assert raw.data[0, 0, 1] == p.white_level


def test_reverse_rejects_odd_dims():
    with pytest.raises(DimensionError):
        run_reverse(RgbImage(np.zeros((7, 8, 3), np.uint8)),
                    dataio.default_params())


def test_reverse_rejects_bit_depth_mismatch():
    with pytest.raises(ParamError, match="bit_depth"):
        run_reverse(RgbImage(np.zeros((4, 4, 3), np.uint8)),
                    dataio.default_params(),
                    ReverseOptions(output_bit_depth=12))


def test_reverse_roundtrip_scene_psnr():
    p = dataio.default_params()
    raw0, rgb = generate_scene(SceneSpec("mixed", (96, 96), seed=1), p)
    rec, mask = run_reverse(rgb, p)
    assert psnr_dn(rec.data, raw0.data, ~mask) >= 50.0


def test_reverse_roundtrip_generator_consistency():
    # the scene generator and both pipelines agree for random parameter draws
    for seed in range(3):
        p = dataio.random_params(seed)
        raw0, rgb = generate_scene(SceneSpec("noise_field", (64, 64),
                                             seed=seed), p)
        rec, mask = run_reverse(rgb, p)
        assert psnr_dn(rec.data, raw0.data, ~mask) >= 50.0


def test_reverse_dark_content_within_2dn():
    # below the gamma shoulder one 8-bit code spans under 2 DN, so the
    # round trip recovers samples almost exactly
    p = IspParams.identity()
    rng = np.random.default_rng(0)
    dn = rng.integers(64, 237, (16, 16, 4)).astype(np.uint16)
    raw = RawImage(dn)
    rgb, _ = run_forward(raw, p)
    rec, _ = run_reverse(rgb, p)
    assert np.abs(rec.data.astype(int) - dn.astype(int)).max() <= 2


def test_reverse_then_forward_reproduces_rgb():
    p = dataio.default_params()
    _, rgb = generate_scene(SceneSpec("gradient", (64, 64), seed=4), p)
    rec, mask = run_reverse(rgb, p)
    again, _ = run_forward(rec, p)
    diff = np.abs(again.data.astype(int) - rgb.data.astype(int))
    keep = ~np.repeat(np.repeat(mask.any(axis=-1), 2, 0), 2, 1)
    assert diff[keep].max() <= 2


def test_reverse_equivariance_exact():
    p = dataio.default_params()
    _, rgb = generate_scene(SceneSpec("mixed", (64, 96), seed=2), p)
    base, base_mask = run_reverse(rgb, p)
    for t in DIHEDRAL_ELEMENTS:
        got, got_mask = run_reverse(dihedral_transform_rgb(rgb, t), p)
        assert np.array_equal(got.data, dihedral_spatial(base.data, t)), t
        assert np.array_equal(got_mask, dihedral_spatial(base_mask, t)), t


def test_reverse_float_input_matches_stored():
    p = dataio.default_params()
    _, rgb = generate_scene(SceneSpec("color_checker", (64, 64), seed=3), p)
    as_float = RgbImage(rgb.data.astype(np.float64) / 255.0)
    a, am = run_reverse(rgb, p)
    b, bm = run_reverse(as_float, p)
    assert np.array_equal(a.data, b.data)
    assert np.array_equal(am, bm)


def test_reverse_threads_bit_identical():
    p = dataio.default_params()
    _, rgb = generate_scene(SceneSpec("noise_field", (128, 64), seed=5), p)
    seq, seq_mask = run_reverse(rgb, p, threads=1)
    for n in (2, 4):
        par, par_mask = run_reverse(rgb, p, threads=n)
        assert np.array_equal(par.data, seq.data)
        assert np.array_equal(par_mask, seq_mask)
    auto, _ = run_reverse(rgb, p, threads=0)
    assert np.array_equal(auto.data, seq.data)


def test_reverse_deterministic_runs():
    p = dataio.random_params(7)
    _, rgb = generate_scene(SceneSpec("mixed", (64, 64), seed=6), p)
    a, _ = run_reverse(rgb, p)
    b, _ = run_reverse(rgb, p)
    assert np.array_equal(a.data, b.data)


def test_reverse_dither_stays_close_and_is_seeded():
    p = dataio.default_params()
    _, rgb = generate_scene(SceneSpec("gradient", (32, 32), seed=0), p)
    base, _ = run_reverse(rgb, p)
    d1, _ = run_reverse(rgb, p, ReverseOptions(dither=True, dither_seed=1))
    d2, _ = run_reverse(rgb, p, ReverseOptions(dither=True, dither_seed=1),
                        threads=3)
    assert np.array_equal(d1.data, d2.data)  # noise is strip-independent
    assert np.abs(d1.data.astype(int) - base.data.astype(int)).max() <= 1


def test_reverse_clip_policy_mark():
    # a sub-unit red gain makes the inverse divide push red above 1.0
    base = IspParams.identity()
    p = IspParams(base.black_level, base.white_level, base.bit_depth,
                  (0.5, 1.0, 1.0), base.ccm, base.tone_weights, base.gamma,
                  base.shading)
    img = np.zeros((2, 2, 3), np.uint8)
    img[:, :, 0] = 200
    raw_c, mask_c = run_reverse(RgbImage(img), p)
    raw_m, mask_m = run_reverse(RgbImage(img), p,
                                ReverseOptions(clip_policy="mark"))
    assert np.array_equal(raw_c.data, raw_m.data)  # values agree, flags differ
    assert np.all(raw_c.data[:, :, 0] == 1023)     # clamped at the DN ceiling
    assert not mask_c.any()
    assert mask_m[:, :, 0].all() and not mask_m[:, :, 1:].any()


# --- batch -------------------------------------------------------------------

def make_batch(tmp_path, n=3, size=(32, 32)):
    p = dataio.default_params()
    entries = []
    raws = []
    for i in range(n):
        raw, rgb = generate_scene(SceneSpec("mixed", size, seed=i), p)
        name = "scene_%03d.png" % i
        dataio.write_rgb_png(tmp_path / name, rgb)
        entries.append(dataio.ManifestEntry(split="train",
                                            pattern=BayerPattern.RGGB,
                                            rgb_path=name))
        raws.append(raw)
    return dataio.DatasetManifest(tuple(entries), root=str(tmp_path)), p, raws


def test_unprocess_batch_empty(tmp_path):
    m = dataio.DatasetManifest((), root=str(tmp_path))
    recs = unprocess_batch(m, dataio.default_params(), tmp_path / "out")
    assert recs == []


def test_unprocess_batch_writes_files(tmp_path):
    m, p, _ = make_batch(tmp_path)
    recs = unprocess_batch(m, p, tmp_path / "out")
    assert len(recs) == 3
    assert all(r["status"] == "ok" for r in recs)
    for i, r in enumerate(recs):
        got = dataio.read_array(r["out"])
        want, _ = run_reverse(dataio.read_rgb_png(tmp_path / r["path"]), p)
        assert np.array_equal(got, want.data)
        assert r["milliseconds"] >= 0
        json.dumps(r)  # records are JSON-serializable


def test_unprocess_batch_isolates_errors(tmp_path):
    m, p, _ = make_batch(tmp_path, n=3)
    broken = dataio.ManifestEntry(split="train", pattern=BayerPattern.RGGB,
                                  rgb_path="missing.png")
    m = dataio.DatasetManifest(m.entries + (broken,), root=m.root)
    recs = unprocess_batch(m, p, tmp_path / "out")
    assert [r["status"] for r in recs] == ["ok", "ok", "ok", "error"]
    assert "error" in recs[-1]


def test_unprocess_batch_skips_raw_only_entries(tmp_path):
    m, p, _ = make_batch(tmp_path, n=1)
    raw_only = dataio.ManifestEntry(split="train", pattern=BayerPattern.RGGB,
                                    raw_path="gt.npy")
    m = dataio.DatasetManifest(m.entries + (raw_only,), root=m.root)
    recs = unprocess_batch(m, p, tmp_path / "out")
    assert len(recs) == 1


def test_unprocess_batch_reverse_hook(tmp_path):
    m, p, _ = make_batch(tmp_path, n=1)
    calls = []

    def fake_reverse(rgb):
        calls.append(rgb.shape)
        return run_reverse(rgb, p)[0]

    recs = unprocess_batch(m, p, tmp_path / "out", reverse_fn=fake_reverse)
    assert calls == [(32, 32)] and recs[0]["status"] == "ok"
