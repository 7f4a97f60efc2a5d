import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_mfcc
from pcgnet.errors import ConfigError, HeatMapFormatError
from pcgnet.features import (
    MfccConfig, MfccExtractor, MfccHeatMap, build_mel_filterbank, colorize, dct_matrix, dft_power,
    expected_shape, fit_normalization, frame_windows, hamming, heatmap_from_bytes, heatmap_to_bytes, inverse_mel,
    mel, ppm_size, read_heatmap, render_ppm, segment_to_heatmap, standardize, write_heatmap,
)
from pcgnet.pcg_io import Label, Quality

RATE = 2000


def test_default_geometry():
    cfg = MfccConfig()
    assert cfg.window_samples(RATE) == 50
    assert cfg.step_samples(RATE) == 20
    assert cfg.dft_size(RATE) == 64
    assert cfg.n_windows(RATE) == 300
    assert expected_shape(cfg, RATE) == (6, 300)


def test_mel_round_trip_and_reference_value():
    # 1125 ln(17/7)
    assert mel(1000.0) == pytest.approx(998.2161, abs=1e-4)
    f = np.linspace(0, 1000, 11)
    assert np.allclose(inverse_mel(mel(f)), f)


def test_hamming_endpoints():
    w = hamming(50)
    assert w[0] == pytest.approx(0.08)
    assert w[-1] == pytest.approx(0.08)
    assert np.allclose(w, w[::-1])


def test_frame_windows_count_and_padding():
    cfg = MfccConfig()
    x = np.arange(6000, dtype=float)
    frames = frame_windows(x, cfg, RATE)
    assert frames.shape == (300, 50)
    assert frames[1, 0] == 20
    # the last window runs past the segment end and is zero-filled
    assert frames[-1, 19] == 5999
    assert np.all(frames[-1, 20:] == 0)


def test_filterbank_peaks_and_support():
    cfg = MfccConfig()
    d = build_mel_filterbank(cfg, RATE)
    assert d.shape == (26, 64)
    assert d.min() >= 0 and d.max() <= 1
    # bins above Nyquist (k > 32) carry no weight
    assert np.all(d[:, 32:] == 0)
    # every filter has non-zero support somewhere
    assert np.all(d.max(axis=1) > 0)


def test_filterbank_rejects_range_above_nyquist():
    with pytest.raises(ConfigError):
        build_mel_filterbank(MfccConfig(freq_high=1500.0), RATE)
    with pytest.raises(ConfigError):
        build_mel_filterbank(MfccConfig(freq_low=500.0, freq_high=400.0), RATE)


def test_dct_basis_orthogonality():
    c = dct_matrix(26)
    gram = c[:-1] @ c[:-1].T
    # rows k=1..J-1 are mutually orthogonal with squared norm J/2
    assert np.allclose(gram, np.eye(25) * 13, atol=1e-9)


def test_dft_power_matches_direct_sum():
    cfg = MfccConfig()
    rng = np.random.default_rng(3)
    w = rng.normal(size=(2, 50))
    p = dft_power(w, cfg, RATE)
    hw = w * hamming(50)
    n = np.arange(50)
    for k in (1, 7, 32, 64):
        s = (hw * np.exp(-2j * np.pi * k * n / 64)).sum(axis=1)
        assert np.allclose(p[:, k - 1], np.abs(s) ** 2 / 50)


def test_extractor_matches_naive_oracle():
    rng = np.random.default_rng(11)
    ex = MfccExtractor(MfccConfig(), RATE)
    for _ in range(5):
        x = rng.uniform(-1, 1, 6000)
        assert np.max(np.abs(ex(x) - naive_mfcc(x))) < 1e-8


def test_extractor_matches_oracle_with_band_limits_and_offset():
    cfg = MfccConfig(freq_low=25.0, freq_high=800.0, first_coefficient=2, filter_count=20)
    x = np.random.default_rng(5).normal(0, 0.3, 6000)
    ref = naive_mfcc(x, J=20, first=2, f_low=25.0, f_high=800.0)
    assert np.max(np.abs(MfccExtractor(cfg, RATE)(x) - ref)) < 1e-8


def test_silence_is_finite():
    hm = segment_to_heatmap(np.zeros(6000))
    assert hm.values.shape == (6, 300)
    assert np.all(np.isfinite(hm.values))


def test_wrong_segment_length_rejected():
    with pytest.raises(ConfigError):
        MfccExtractor()(np.zeros(5999))


def test_config_validation():
    with pytest.raises(ConfigError):
        MfccConfig(kept_coefficients=30)
    with pytest.raises(ConfigError):
        MfccConfig(step=0.05)
    with pytest.raises(ConfigError):
        MfccConfig(window_length=0.0251).window_samples(RATE)
    with pytest.raises(ConfigError):
        MfccConfig(dft_length=32).dft_size(RATE)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_heatmaps_finite_property(seed):
    x = np.random.default_rng(seed).uniform(-1, 1, 6000) * np.random.default_rng(seed + 1).uniform(0, 1)
    assert np.all(np.isfinite(segment_to_heatmap(x).values))


def test_standardize_fits_per_row():
    rng = np.random.default_rng(0)
    maps = [MfccHeatMap(rng.normal(loc=np.arange(6)[:, None], scale=2.0, size=(6, 300))) for _ in range(8)]
    std, stats = standardize(maps)
    stacked = np.stack([m.values for m in std])
    assert np.allclose(stacked.mean(axis=(0, 2)), 0, atol=1e-12)
    assert np.allclose(stacked.std(axis=(0, 2)), 1, atol=1e-12)
    # applying the same stats again is deterministic
    again, _ = standardize(maps, stats)
    assert all(np.array_equal(a.values, b.values) for a, b in zip(std, again))


def test_standardize_constant_row_uses_floor():
    maps = [MfccHeatMap(np.ones((6, 300)))]
    stats = fit_normalization(maps)
    assert np.all(stats.std == 1e-6)
    std, _ = standardize(maps, stats)
    assert np.all(std[0].values == 0)


def test_heatmap_file_round_trip(tmp_path):
    values = np.random.default_rng(1).normal(size=(6, 300)).astype(np.float32)
    hm = MfccHeatMap(values, "rec1", 0, Label.ABNORMAL, Quality.POOR)
    path = tmp_path / "rec1.mfhm"
    write_heatmap(hm, path)
    back = read_heatmap(path)
    assert np.array_equal(back.values, values)
    assert back.label is Label.ABNORMAL and back.quality is Quality.POOR
    assert back.source_id == "rec1"


def test_heatmap_corruption_detected():
    data = heatmap_to_bytes(MfccHeatMap(np.zeros((6, 300), dtype=np.float32)))
    with pytest.raises(HeatMapFormatError):
        heatmap_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(HeatMapFormatError):
        heatmap_from_bytes(data[:-4])
    with pytest.raises(HeatMapFormatError):
        heatmap_from_bytes(data[:5])


def test_render_dimensions_and_scale():
    hm = MfccHeatMap(np.random.default_rng(0).normal(size=(6, 300)))
    img = render_ppm(hm)
    assert ppm_size(img) == (300, 6)
    assert len(img) == len(b"P6\n300 6\n255\n") + 300 * 6 * 3
    big = render_ppm(hm, scale=4)
    assert ppm_size(big) == (1200, 24)


def test_colorize_ramp_ends():
    rgb = colorize(np.array([[0.0, 1.0]]))
    assert tuple(rgb[0, 0]) == (68, 1, 84)
    assert tuple(rgb[0, 1]) == (253, 231, 37)
    flat = colorize(np.zeros((2, 2)))
    assert np.all(flat == np.array([68, 1, 84]))
