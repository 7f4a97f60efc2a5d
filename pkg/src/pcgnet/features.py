"""MFCC heat maps for fixed-length PCG segments.

Each segment is cut into overlapping Hamming-weighted windows, turned into
power spectra, pooled by a Mel-spaced triangular filterbank, log-compressed
and decorrelated with a cosine transform. Stacking the retained cepstral
coefficients of every window gives a ``kept_coefficients x n_windows`` map
(6 x 300 for a 3 s segment with the default configuration).
"""

from __future__ import annotations

import dataclasses
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, HeatMapFormatError
from .pcg_io import Label, Quality

LOG_FLOOR = 1e-12
STD_FLOOR = 1e-6


@dataclasses.dataclass(frozen=True)
class MfccConfig:
    window_length: float = 0.025
    step: float = 0.01
    dft_length: int | None = None  # default: next power of two >= window samples
    filter_count: int = 26
    kept_coefficients: int = 6
    first_coefficient: int = 1
    freq_low: float = 0.0
    freq_high: float | None = None  # default: Nyquist
    segment_length: float = 3.0

    def __post_init__(self):
        if not 0 < self.step <= self.window_length:
            raise ConfigError("need 0 < step <= window_length")
        if not 1 <= self.kept_coefficients <= self.filter_count:
            raise ConfigError("kept_coefficients must lie in [1, filter_count]")
        if not 1 <= self.first_coefficient <= self.filter_count - self.kept_coefficients + 1:
            raise ConfigError("retained coefficient range exceeds filter_count")
        if self.segment_length <= 0:
            raise ConfigError("segment_length must be positive")

    def window_samples(self, rate: float) -> int:
        return _as_samples(self.window_length, rate, "window_length")

    def step_samples(self, rate: float) -> int:
        return _as_samples(self.step, rate, "step")

    def segment_samples(self, rate: float) -> int:
        return _as_samples(self.segment_length, rate, "segment_length")

    def n_windows(self, rate: float) -> int:
        return self.segment_samples(rate) // self.step_samples(rate)

    def dft_size(self, rate: float) -> int:
        n = self.window_samples(rate)
        if self.dft_length is None:
            return 1 << (n - 1).bit_length()
        if self.dft_length < n:
            raise ConfigError(f"dft_length {self.dft_length} shorter than window ({n} samples)")
        return self.dft_length

    def freq_range(self, rate: float) -> tuple[float, float]:
        high = rate / 2.0 if self.freq_high is None else self.freq_high
        return self.freq_low, high


def _as_samples(seconds: float, rate: float, name: str) -> int:
    n = seconds * rate
    r = round(n)
    if r < 1 or abs(n - r) > 1e-6:
        raise ConfigError(f"{name}={seconds}s is not a whole number of samples at {rate} Hz")
    return int(r)


@dataclasses.dataclass
class MfccHeatMap:
    values: np.ndarray  # (coefficient, window); row 0 is drawn at the top
    source_id: str = ""
    start_sample: int = 0
    label: Label = Label.UNKNOWN
    quality: Quality = Quality.UNKNOWN

    @property
    def shape(self):
        return self.values.shape


@dataclasses.dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray


def mel(f):
    return 1125.0 * np.log1p(np.asarray(f, dtype=np.float64) / 700.0)


def inverse_mel(m):
    return 700.0 * np.expm1(np.asarray(m, dtype=np.float64) / 1125.0)


def hamming(n: int) -> np.ndarray:
    if n == 1:
        return np.ones(1)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(n) / (n - 1))


def frame_windows(samples, cfg: MfccConfig, rate: float) -> np.ndarray:
    """Cut a segment into ``floor(T / step)`` windows of ``window_length``.

    Window ``i`` (0-based) starts at sample ``i * step * rate``; windows
    running past the end of the segment are zero-padded.
    """
    x = np.asarray(samples, dtype=np.float64)
    n = cfg.window_samples(rate)
    hop = cfg.step_samples(rate)
    count = len(x) // hop
    padded = np.zeros((count - 1) * hop + n if count else 0)
    padded[: len(x)] = x[: len(padded)]
    if count == 0:
        return np.zeros((0, n))
    idx = np.arange(count)[:, None] * hop + np.arange(n)[None, :]
    return padded[idx]


def dft_power(windows, cfg: MfccConfig, rate: float) -> np.ndarray:
    """Hamming-weighted power spectra ``|S(k)|^2 / N`` for bins k = 1..K.

    Column ``k - 1`` of the result holds bin ``k``; bin ``K`` aliases DC.
    The transform is zero-padded to K points.
    """
    w = np.asarray(windows, dtype=np.float64)
    n = w.shape[-1]
    k = cfg.dft_size(rate)
    spec = np.fft.fft(w * hamming(n), n=k, axis=-1)
    power = (spec.real ** 2 + spec.imag ** 2) / n
    return np.roll(power, -1, axis=-1)


def build_mel_filterbank(cfg: MfccConfig, rate: float) -> np.ndarray:
    """Triangular filters ``d[j, k]`` with Mel-uniform peaks.

    ``filter_count + 2`` points are spaced evenly on the Mel axis between the
    configured band edges; filter ``j`` rises from point ``j - 1`` to a peak
    of 1 at point ``j`` and falls to zero at point ``j + 1``. Columns follow
    the bin order of :func:`dft_power` (bin ``k`` sits at ``k * rate / K``).
    """
    low, high = cfg.freq_range(rate)
    if not 0.0 <= low < high <= rate / 2.0:
        raise ConfigError(f"frequency range [{low}, {high}] Hz outside [0, {rate / 2}] Hz")
    n_fft = cfg.dft_size(rate)
    edges = inverse_mel(np.linspace(mel(low), mel(high), cfg.filter_count + 2))
    freqs = np.arange(1, n_fft + 1) * rate / n_fft
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - left) / (center - left)
    falling = (right - freqs) / (right - center)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def log_filter_energies(power, filters) -> np.ndarray:
    energies = np.asarray(power, dtype=np.float64) @ np.asarray(filters, dtype=np.float64).T
    return np.log(energies + LOG_FLOOR)


def dct_matrix(n_filters: int) -> np.ndarray:
    """Rows k = 1..J of the cosine basis ``cos(k (2j - 1) pi / 2J)``."""
    k = np.arange(1, n_filters + 1)[:, None]
    j = np.arange(1, n_filters + 1)[None, :]
    return np.cos(k * (2 * j - 1) * np.pi / (2 * n_filters))


def dct_coefficients(log_energies, cfg: MfccConfig) -> np.ndarray:
    c = np.asarray(log_energies, dtype=np.float64)
    if c.shape[-1] != cfg.filter_count:
        raise ConfigError(f"expected {cfg.filter_count} filter energies, got {c.shape[-1]}")
    first = cfg.first_coefficient - 1
    basis = dct_matrix(cfg.filter_count)[first: first + cfg.kept_coefficients]
    return c @ basis.T


class MfccExtractor:
    """Caches the filterbank so many segments can be converted cheaply."""

    def __init__(self, cfg: MfccConfig | None = None, rate: float = 2000):
        self.cfg = cfg or MfccConfig()
        self.rate = rate
        self.filters = build_mel_filterbank(self.cfg, rate)
        # only bins up to Nyquist carry filter weight
        self._n_fft = self.cfg.dft_size(rate)
        self._half = self._n_fft // 2
        self._filters_half = self.filters[:, : self._half]
        self._window = hamming(self.cfg.window_samples(rate))
        first = self.cfg.first_coefficient - 1
        self._dct = dct_matrix(self.cfg.filter_count)[first: first + self.cfg.kept_coefficients]

    def __call__(self, samples) -> np.ndarray:
        x = np.asarray(samples, dtype=np.float64)
        expected = self.cfg.segment_samples(self.rate)
        if len(x) != expected:
            raise ConfigError(f"segment has {len(x)} samples, expected {expected}")
        frames = frame_windows(x, self.cfg, self.rate)
        spec = np.fft.rfft(frames * self._window, n=self._n_fft, axis=-1)
        power = (spec.real ** 2 + spec.imag ** 2) / frames.shape[-1]
        energies = power[:, 1: self._half + 1] @ self._filters_half.T
        return (np.log(energies + LOG_FLOOR) @ self._dct.T).T


def segment_to_heatmap(segment, cfg: MfccConfig | None = None, rate: float = 2000,
                       extractor: MfccExtractor | None = None) -> MfccHeatMap:
    """Convert a segment (or bare sample array) into an :class:`MfccHeatMap`."""
    if extractor is None:
        extractor = MfccExtractor(cfg, rate)
    samples = getattr(segment, "samples", segment)
    return MfccHeatMap(
        values=extractor(samples),
        source_id=getattr(segment, "source_id", ""),
        start_sample=getattr(segment, "start_sample", 0),
        label=getattr(segment, "label", Label.UNKNOWN),
        quality=getattr(segment, "quality", Quality.UNKNOWN),
    )


def _stack(maps) -> np.ndarray:
    return np.stack([getattr(m, "values", m) for m in maps]).astype(np.float64)


def fit_normalization(maps: Sequence[MfccHeatMap]) -> NormalizationStats:
    if len(maps) == 0:
        raise ValueError("cannot fit normalization statistics on zero maps")
    x = _stack(maps)
    mean = x.mean(axis=(0, 2))
    std = x.std(axis=(0, 2))
    return NormalizationStats(mean=mean, std=np.maximum(std, STD_FLOOR))


def standardize(maps: Sequence[MfccHeatMap], stats: NormalizationStats | None = None):
    """Per-row standardisation; fits ``stats`` on ``maps`` when none are given."""
    if stats is None:
        stats = fit_normalization(maps)
    mean = np.asarray(stats.mean)[:, None]
    std = np.maximum(np.asarray(stats.std), STD_FLOOR)[:, None]
    out = [dataclasses.replace(m, values=(m.values - mean) / std) for m in maps]
    return out, stats


# heat-map file format

_MAGIC = b"MFHM"
_VERSION = 1
_HEADER = struct.Struct("<4sHIIBB")
_LABEL_CODES = {Label.NORMAL: 0, Label.ABNORMAL: 1, Label.UNKNOWN: 255}
_QUALITY_CODES = {Quality.GOOD: 0, Quality.POOR: 1, Quality.UNKNOWN: 255}


def heatmap_to_bytes(hm: MfccHeatMap) -> bytes:
    rows, cols = hm.values.shape
    header = _HEADER.pack(_MAGIC, _VERSION, rows, cols,
                          _LABEL_CODES[Label(hm.label)], _QUALITY_CODES[Quality(hm.quality)])
    return header + np.ascontiguousarray(hm.values, dtype="<f4").tobytes()


def heatmap_from_bytes(data: bytes, source_id: str = "") -> MfccHeatMap:
    if len(data) < _HEADER.size:
        raise HeatMapFormatError("heat-map file too short")
    magic, version, rows, cols, lab, qual = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC:
        raise HeatMapFormatError("bad heat-map magic")
    if version != _VERSION:
        raise HeatMapFormatError(f"unsupported heat-map version {version}")
    body = data[_HEADER.size:]
    if len(body) != rows * cols * 4:
        raise HeatMapFormatError("heat-map payload size mismatch")
    labels = {v: k for k, v in _LABEL_CODES.items()}
    qualities = {v: k for k, v in _QUALITY_CODES.items()}
    if lab not in labels or qual not in qualities:
        raise HeatMapFormatError("bad label or quality code")
    values = np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float32)
    return MfccHeatMap(values=values, source_id=source_id, label=labels[lab], quality=qualities[qual])


def write_heatmap(hm: MfccHeatMap, path: str | Path) -> None:
    Path(path).write_bytes(heatmap_to_bytes(hm))


def read_heatmap(path: str | Path) -> MfccHeatMap:
    path = Path(path)
    return heatmap_from_bytes(path.read_bytes(), source_id=path.stem)


# rendering

# Five anchors sampled from the viridis colormap, linearly interpolated.
COLOR_RAMP = np.array([
    [68, 1, 84],
    [59, 82, 139],
    [33, 145, 140],
    [94, 201, 98],
    [253, 231, 37],
], dtype=np.float64)


def colorize(values) -> np.ndarray:
    """Map values to RGB bytes, scaling the min..max range onto the ramp."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    t = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    pos = t * (len(COLOR_RAMP) - 1)
    i = np.minimum(np.floor(pos).astype(int), len(COLOR_RAMP) - 2)
    frac = (pos - i)[..., None]
    rgb = COLOR_RAMP[i] * (1 - frac) + COLOR_RAMP[i + 1] * frac
    return np.round(rgb).astype(np.uint8)


def render_ppm(hm: MfccHeatMap | np.ndarray, scale: int = 1) -> bytes:
    """Binary PPM (P6) of a heat map; coefficient 1 is the top image row."""
    if scale < 1:
        raise ValueError("scale must be >= 1")
    values = getattr(hm, "values", hm)
    rgb = colorize(values)
    if scale > 1:
        rgb = rgb.repeat(scale, axis=0).repeat(scale, axis=1)
    h, w = rgb.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def ppm_size(data: bytes) -> tuple[int, int]:
    """Width and height from a P6 header."""
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a P6 pixmap")
    w, h = (int(s) for s in parts[1].split())
    return w, h


def expected_shape(cfg: MfccConfig, rate: float) -> tuple[int, int]:
    return cfg.kept_coefficients, cfg.n_windows(rate)


__all__ = [
    "MfccConfig", "MfccHeatMap", "NormalizationStats", "MfccExtractor",
    "mel", "inverse_mel", "hamming", "frame_windows", "dft_power",
    "build_mel_filterbank", "log_filter_energies", "dct_matrix", "dct_coefficients",
    "segment_to_heatmap", "standardize", "fit_normalization",
    "write_heatmap", "read_heatmap", "heatmap_to_bytes", "heatmap_from_bytes",
    "render_ppm", "colorize", "ppm_size", "expected_shape",
]
