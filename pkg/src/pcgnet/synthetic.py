"""Synthetic phonocardiograms with known S1 onsets.

Normal recordings contain S1 and S2 tone bursts (carrier 50-150 Hz,
half-sine envelopes) at a beat rate near 1 Hz over low-level white noise.
Abnormal recordings add band-limited 200-400 Hz noise filling systole, a
crude stand-in for a systolic murmur. Poor-quality recordings carry more
background noise.

Per recording, with ``rng`` supplying every random draw:

* beat period ``U(0.9, 1.1)`` s, each beat jittered by ``N(0, 0.02)`` s;
* first S1 onset ``U(0, period)`` s into the recording;
* S1 lasts 0.10 s with carrier ``U(50, 100)`` Hz and amplitude 1.0;
* S2 starts 0.30 s after S1 onset, lasts 0.08 s, carrier ``U(90, 150)`` Hz,
  amplitude 0.7;
* background noise std 0.02 (good) or 0.08 (poor);
* murmur (abnormal only): 200-400 Hz band noise, rms 0.25, from S1 end to
  S2 start, with 10 ms raised-cosine ramps;
* the sum is scaled so its peak magnitude is 0.9.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy import signal

from .pcg_io import CANONICAL_RATE, DatasetManifest, Label, ManifestEntry, PcgRecording, Quality, write_wav

S1_DURATION = 0.10
S2_DELAY = 0.30
S2_DURATION = 0.08


@dataclasses.dataclass
class SyntheticRecording:
    recording: PcgRecording
    s1_onsets: np.ndarray  # sample indices


def _burst(n, rate, freq, rng):
    t = np.arange(n) / rate
    return np.sin(np.pi * np.arange(n) / n) * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))


def _ramp(n, rate, ramp=0.01):
    w = np.ones(n)
    r = min(int(ramp * rate), n // 2)
    if r > 0:
        edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
        w[:r] = edge
        w[-r:] = edge[::-1]
    return w


def generate_recording(rng: np.random.Generator, abnormal: bool = False, duration: float = 10.0,
                       rate: int = CANONICAL_RATE, quality: Quality = Quality.GOOD,
                       record_id: str = "synth", subject_id: str | None = None) -> SyntheticRecording:
    n = int(round(duration * rate))
    x = np.zeros(n)
    period = rng.uniform(0.9, 1.1)
    f1 = rng.uniform(50, 100)
    f2 = rng.uniform(90, 150)
    murmur_sos = signal.butter(4, [200.0, 400.0], btype="band", fs=rate, output="sos")

    onsets = []
    t = rng.uniform(0.0, period)
    n1, n2 = int(S1_DURATION * rate), int(S2_DURATION * rate)
    while t < duration:
        o = int(round(t * rate))
        onsets.append(o)
        seg = _burst(n1, rate, f1, rng)
        x[o:o + n1] += seg[: max(0, min(n1, n - o))]
        o2 = o + int(S2_DELAY * rate)
        if o2 < n:
            seg = 0.7 * _burst(n2, rate, f2, rng)
            x[o2:o2 + n2] += seg[: min(n2, n - o2)]
        if abnormal:
            a, b = o + n1, min(o2, n)
            if b - a > 4:
                noise = signal.sosfilt(murmur_sos, rng.standard_normal(b - a + 200))[200:]
                noise *= 0.25 / (noise.std() + 1e-12)
                x[a:b] += noise * _ramp(b - a, rate)
        t += period + rng.normal(0.0, 0.02)

    sigma = 0.02 if quality is Quality.GOOD else 0.08
    x += rng.normal(0.0, sigma, n)
    x *= 0.9 / np.max(np.abs(x))
    rec = PcgRecording(
        id=record_id, samples=x, sample_rate=rate,
        subject_id=subject_id if subject_id is not None else record_id,
        label=Label.ABNORMAL if abnormal else Label.NORMAL, quality=quality,
    )
    return SyntheticRecording(rec, np.asarray(onsets, dtype=int))


def generate_dataset(n: int, seed: int = 0, abnormal_fraction: float = 0.2, poor_fraction: float = 0.2,
                     duration: float = 10.0, rate: int = CANONICAL_RATE, prefix: str = "s") -> list[SyntheticRecording]:
    """``n`` recordings, one subject each; labels and qualities drawn independently."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        abnormal = bool(rng.random() < abnormal_fraction)
        quality = Quality.POOR if rng.random() < poor_fraction else Quality.GOOD
        rid = f"{prefix}{i:04d}"
        out.append(generate_recording(rng, abnormal, duration, rate, quality, record_id=rid,
                                      subject_id=f"subj_{prefix}{i:04d}"))
    return out


def write_dataset(items: list[SyntheticRecording], directory, manifest_name: str = "manifest.csv"):
    """Write WAV files plus a manifest into ``directory``; returns the manifest path."""
    from pathlib import Path

    from .pcg_io import write_manifest

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for item in items:
        r = item.recording
        write_wav(r, directory / f"{r.id}.wav")
        entries.append(ManifestEntry(r.id, f"{r.id}.wav", r.label, r.quality, r.subject_id))
    path = directory / manifest_name
    write_manifest(DatasetManifest(entries), path)
    return path
