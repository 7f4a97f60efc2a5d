"""Loading, resampling and labelling of phonocardiogram recordings."""

from __future__ import annotations

import csv
import dataclasses
import enum
import logging
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ManifestError, UnsupportedChannels, UnsupportedEncoding

logger = logging.getLogger(__name__)

CANONICAL_RATE = 2000
KAISER_BETA = 8.0
SINC_ZEROS = 16
PASSBAND = 0.95

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE
_PCM_SUBFORMAT_PREFIX = b"\x01\x00\x00\x00"


class Label(str, enum.Enum):
    NORMAL = "normal"
    ABNORMAL = "abnormal"
    UNKNOWN = "unknown"


class Quality(str, enum.Enum):
    GOOD = "good"
    POOR = "poor"
    UNKNOWN = "unknown"


@dataclasses.dataclass
class PcgRecording:
    id: str
    samples: np.ndarray
    sample_rate: int
    subject_id: str = ""
    label: Label = Label.UNKNOWN
    quality: Quality = Quality.UNKNOWN

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclasses.dataclass(frozen=True)
class ManifestEntry:
    record_id: str
    path: str
    label: Label
    quality: Quality
    subject_id: str


@dataclasses.dataclass
class DatasetManifest:
    entries: list[ManifestEntry]

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.record_id in seen:
                raise ManifestError(f"duplicate record_id {e.record_id!r} in manifest")
            seen.add(e.record_id)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.record_id: e for e in self.entries}


MANIFEST_HEADER = ("record_id", "path", "label", "quality", "subject_id")


def read_manifest(path: str | Path) -> DatasetManifest:
    """Parse a ``record_id,path,label,quality,subject_id`` CSV file."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_HEADER:
            raise ManifestError(f"manifest header must be {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            label = row["label"].strip().lower()
            quality = row["quality"].strip().lower()
            if label not in ("normal", "abnormal"):
                raise ManifestError(f"line {lineno}: bad label {row['label']!r}")
            if quality not in ("good", "poor", "unknown"):
                raise ManifestError(f"line {lineno}: bad quality {row['quality']!r}")
            entries.append(ManifestEntry(
                record_id=row["record_id"].strip(),
                path=row["path"].strip(),
                label=Label(label),
                quality=Quality(quality),
                subject_id=row["subject_id"].strip(),
            ))
    return DatasetManifest(entries)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for e in manifest:
            writer.writerow([e.record_id, e.path, e.label.value, e.quality.value, e.subject_id])


def _iter_chunks(data: bytes, offset: int):
    while offset + 8 <= len(data):
        chunk_id, size = struct.unpack_from("<4sI", data, offset)
        body = data[offset + 8: offset + 8 + size]
        if len(body) < size:
            raise FormatError(f"chunk {chunk_id!r} truncated")
        yield chunk_id, body
        offset += 8 + size + (size & 1)


def load_wav(path: str | Path, record_id: str | None = None) -> PcgRecording:
    """Read a mono 16-bit PCM RIFF/WAVE file.

    Samples are scaled by 1/32768 so every value lies in [-1, 1). Label and
    quality stay ``UNKNOWN`` until :func:`join_manifest` fills them in.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    pcm = None
    for chunk_id, body in _iter_chunks(data, 12):
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise FormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == _WAVE_FORMAT_EXTENSIBLE:
                if len(body) < 40 or body[24:28] != _PCM_SUBFORMAT_PREFIX:
                    raise UnsupportedEncoding(f"{path}: extensible format is not PCM")
        elif chunk_id == b"data":
            pcm = body
    if fmt is None or pcm is None:
        raise FormatError(f"{path}: missing fmt or data chunk")

    audio_format, channels, rate, _, block_align, bits = fmt
    if audio_format not in (_WAVE_FORMAT_PCM, _WAVE_FORMAT_EXTENSIBLE):
        raise UnsupportedEncoding(f"{path}: audio format {audio_format:#06x} is not PCM")
    if channels != 1:
        raise UnsupportedChannels(f"{path}: {channels} channels, expected mono")
    if bits != 16:
        raise UnsupportedEncoding(f"{path}: {bits}-bit samples, expected 16-bit")
    if rate <= 0 or block_align != 2:
        raise FormatError(f"{path}: inconsistent fmt header")
    if len(pcm) < 2:
        raise FormatError(f"{path}: no samples")

    ints = np.frombuffer(pcm[: len(pcm) // 2 * 2], dtype="<i2")
    return PcgRecording(
        id=record_id if record_id is not None else path.stem,
        samples=ints.astype(np.float64) / 32768.0,
        sample_rate=int(rate),
    )


def write_wav(rec: PcgRecording, path: str | Path) -> None:
    """Write a recording as mono 16-bit PCM; inverse of :func:`load_wav`."""
    ints = np.clip(np.round(rec.samples * 32768.0), -32768, 32767).astype("<i2")
    payload = ints.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, _WAVE_FORMAT_PCM, 1, rec.sample_rate, rec.sample_rate * 2, 2, 16,
        b"data", len(payload),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        if len(payload) & 1:
            fh.write(b"\x00")


def _kaiser(x, beta):
    # continuous Kaiser window on [-1, 1]
    inside = np.abs(x) <= 1.0
    arg = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    return np.where(inside, np.i0(beta * arg) / np.i0(beta), 0.0)


def resample(rec: PcgRecording, target_rate: int) -> PcgRecording:
    """Kaiser-windowed sinc interpolation to ``target_rate``.

    The low-pass cutoff sits at ``PASSBAND`` times the lower of the two
    Nyquist frequencies, so downsampling is band-limited. Kernel weights are
    renormalised per output sample, which keeps DC exact up to the edges.
    """
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == rec.sample_rate:
        return dataclasses.replace(rec, samples=rec.samples.copy())

    x = rec.samples
    n_in = len(x)
    n_out = max(1, int(round(n_in * target_rate / rec.sample_rate)))
    step = rec.sample_rate / target_rate
    cutoff = PASSBAND * min(1.0, target_rate / rec.sample_rate)  # cycles per input sample * 2
    half_width = int(np.ceil(SINC_ZEROS / cutoff))

    out = np.empty(n_out)
    taps = np.arange(-half_width, half_width + 1)
    chunk = max(1, 2 ** 20 // len(taps))
    for lo in range(0, n_out, chunk):
        pos = np.arange(lo, min(lo + chunk, n_out)) * step
        idx = np.floor(pos).astype(np.int64)[:, None] + taps[None, :]
        tau = pos[:, None] - idx
        w = np.sinc(cutoff * tau) * _kaiser(tau / (half_width + 1), KAISER_BETA)
        valid = (idx >= 0) & (idx < n_in)
        w = np.where(valid, w, 0.0)
        vals = x[np.clip(idx, 0, n_in - 1)]
        out[lo: lo + len(pos)] = (w * vals).sum(axis=1) / w.sum(axis=1)
    np.clip(out, -1.0, 1.0, out=out)
    return dataclasses.replace(rec, samples=out, sample_rate=int(target_rate))


def join_manifest(recs: Iterable[PcgRecording], manifest: DatasetManifest) -> list[PcgRecording]:
    """Attach label, quality and subject id from ``manifest``.

    Output follows manifest order. Recordings without an entry are dropped
    and counted in a logged warning.
    """
    by_id = {}
    for r in recs:
        by_id[r.id] = r
    entries = manifest.by_id()
    missing = [e.record_id for e in manifest if e.record_id not in by_id]
    if missing:
        raise ManifestError(f"manifest entries without a loaded recording: {missing[:5]}")
    dropped = sum(1 for rid in by_id if rid not in entries)
    if dropped:
        logger.warning("dropped %d recording(s) absent from manifest", dropped)
    out = []
    for e in manifest:
        r = by_id[e.record_id]
        out.append(dataclasses.replace(r, label=e.label, quality=e.quality, subject_id=e.subject_id))
    return out


def load_dataset(
    manifest: DatasetManifest | str | Path,
    data_dir: str | Path | None = None,
    target_rate: int = CANONICAL_RATE,
) -> list[PcgRecording]:
    """Load every file in ``manifest``, resample to ``target_rate`` and label it.

    Relative paths resolve against ``data_dir`` (default: the manifest's
    directory when a path is given, otherwise the working directory).
    """
    if not isinstance(manifest, DatasetManifest):
        manifest_path = Path(manifest)
        manifest = read_manifest(manifest_path)
        base = Path(data_dir) if data_dir is not None else manifest_path.parent
    else:
        base = Path(data_dir) if data_dir is not None else Path(".")
    recs = []
    for e in manifest:
        p = Path(e.path)
        if not p.is_absolute():
            p = base / p
        if not p.is_file():
            raise FormatError(f"missing audio file for {e.record_id}: {p}")
        rec = load_wav(p, record_id=e.record_id)
        if rec.sample_rate != target_rate:
            rec = resample(rec, target_rate)
        recs.append(rec)
    return join_manifest(recs, manifest)


def labelled_counts(recs: Sequence[PcgRecording]) -> dict[str, int]:
    counts = {"recordings": len(recs)}
    for lab in Label:
        counts[f"label_{lab.value}"] = sum(r.label is lab for r in recs)
    for q in Quality:
        counts[f"quality_{q.value}"] = sum(r.quality is q for r in recs)
    return counts
