"""Heart-cycle segmentation and S1-anchored segment extraction.

Recordings are reduced to 50 Hz envelope features, converted into
per-frame state likelihoods by an emission model, and decoded with a
duration-constrained Viterbi search over the cyclic state sequence
S1 -> systole -> S2 -> diastole. Every decoded S1 onset then anchors a
fixed-length segment.

Path objective
--------------
A path is a run-length sequence of ``(state, duration)`` pairs whose
states follow the cycle and whose durations cover all frames. Its score is

    sum over frames of log(max(likelihood, 1e-9))
  + sum over runs of -0.5 * ((d - mean) / std) ** 2

with ``mean`` and ``std`` in frames and ``d`` restricted to
``[min, max]``. This is the Gaussian log-density up to its per-state
constant, so a run at the mean costs nothing. With ``open_ends=True`` the
first and last runs may be cut off by the recording edges; such a run of
observed length ``d`` scores the best full duration ``d' >= d`` it could
extend to, and needs ``d <= max`` only.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import logging
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy import signal

from .errors import DecodeError, FitError, SegmentationEmpty, TooShort
from .pcg_io import CANONICAL_RATE, Label, PcgRecording, Quality

logger = logging.getLogger(__name__)

FRAME_RATE = 50
LIKELIHOOD_FLOOR = 1e-9


class HeartState(enum.IntEnum):
    S1 = 0
    SYSTOLE = 1
    S2 = 2
    DIASTOLE = 3

    @property
    def successor(self) -> "HeartState":
        return HeartState((self + 1) % 4)

    @property
    def predecessor(self) -> "HeartState":
        return HeartState((self - 1) % 4)


STATE_CODES = {"S1": HeartState.S1, "SYS": HeartState.SYSTOLE,
               "S2": HeartState.S2, "DIA": HeartState.DIASTOLE}


@dataclasses.dataclass(frozen=True)
class DurationPrior:
    """Per-state duration statistics in seconds, ordered S1, systole, S2, diastole."""

    mean: tuple[float, float, float, float]
    std: tuple[float, float, float, float]
    min: tuple[float, float, float, float]
    max: tuple[float, float, float, float]

    def __post_init__(self):
        for name in ("mean", "std", "min", "max"):
            if len(getattr(self, name)) != 4:
                raise ValueError(f"{name} needs one value per state")
        for s in range(4):
            if not 0 < self.min[s] <= self.mean[s] <= self.max[s]:
                raise ValueError(f"state {HeartState(s).name}: need 0 < min <= mean <= max")
            if self.std[s] <= 0:
                raise ValueError(f"state {HeartState(s).name}: std must be positive")

    @classmethod
    def default(cls, mean=(0.12, 0.20, 0.10, 0.50), rel_std=0.3) -> "DurationPrior":
        mean = tuple(float(m) for m in mean)
        std = tuple(rel_std * m for m in mean)
        lo = tuple(max(m - 3 * s, 1e-3) for m, s in zip(mean, std))
        hi = tuple(m + 3 * s for m, s in zip(mean, std))
        return cls(mean=mean, std=std, min=lo, max=hi)

    def in_frames(self, frame_rate: float):
        """``(mean, std, dmin, dmax)`` arrays in frame units."""
        mean = np.asarray(self.mean) * frame_rate
        std = np.asarray(self.std) * frame_rate
        dmin = np.maximum(1, np.round(np.asarray(self.min) * frame_rate)).astype(int)
        dmax = np.maximum(dmin, np.round(np.asarray(self.max) * frame_rate)).astype(int)
        return mean, std, dmin, dmax


@dataclasses.dataclass
class StateSequence:
    frame_rate: float
    states: np.ndarray
    s1_onsets: np.ndarray  # sample indices
    sample_rate: int = CANONICAL_RATE

    @property
    def s1_onset_frames(self) -> np.ndarray:
        return onset_frames(self.states)

    def runs(self) -> list[tuple[HeartState, int]]:
        return states_to_runs(self.states)


@dataclasses.dataclass
class Segment:
    source_id: str
    start_sample: int
    samples: np.ndarray
    label: Label = Label.UNKNOWN
    quality: Quality = Quality.UNKNOWN
    padded: bool = False


def onset_frames(states) -> np.ndarray:
    s = np.asarray(states)
    if s.size == 0:
        return np.zeros(0, dtype=int)
    starts = np.flatnonzero((s[1:] == HeartState.S1) & (s[:-1] == HeartState.DIASTOLE)) + 1
    if s[0] == HeartState.S1:
        starts = np.concatenate([[0], starts])
    return starts.astype(int)


def states_to_runs(states) -> list[tuple[HeartState, int]]:
    s = np.asarray(states)
    runs = []
    start = 0
    for i in range(1, len(s) + 1):
        if i == len(s) or s[i] != s[start]:
            runs.append((HeartState(int(s[start])), i - start))
            start = i
    return runs


def runs_to_states(runs) -> np.ndarray:
    return np.concatenate([np.full(d, int(s)) for s, d in runs]) if runs else np.zeros(0, dtype=int)


# envelope features

def _filtfilt(sos, x):
    padlen = min(3 * (2 * len(sos) + 1), len(x) - 1)
    return signal.sosfiltfilt(sos, x, padlen=max(padlen, 0))


def _scale(channel):
    ref = np.percentile(channel, 95) if channel.size else 0.0
    if ref <= 1e-12:
        ref = np.max(np.abs(channel)) if channel.size else 0.0
    return channel / ref if ref > 1e-12 else channel


def compute_envelope_features(rec: PcgRecording, frame_rate: float = FRAME_RATE) -> np.ndarray:
    """Per-frame ``[envelope, envelope difference, 25-150 Hz band power]``.

    The envelope is the 25-400 Hz band, rectified and low-passed at 20 Hz.
    Envelope and band power are averaged over each frame and divided by
    their 95th percentile, so they are non-negative and amplitude-free.
    The difference channel is the frame-to-frame change of the scaled
    envelope (0 for the first frame).
    """
    rate = rec.sample_rate
    hop = int(round(rate / frame_rate))
    x = np.asarray(rec.samples, dtype=np.float64)
    n_frames = len(x) // hop if hop > 0 else 0
    if n_frames < 1:
        raise TooShort(f"{rec.id}: {len(x)} samples is shorter than one {1000 / frame_rate:g} ms frame")
    nyq = rate / 2.0
    wide = signal.butter(4, [25.0 / nyq, min(400.0, 0.45 * rate) / nyq], btype="band", output="sos")
    narrow = signal.butter(4, [25.0 / nyq, min(150.0, 0.45 * rate) / nyq], btype="band", output="sos")
    smooth = signal.butter(2, 20.0 / nyq, output="sos")

    x = x[: n_frames * hop]
    env = np.clip(_filtfilt(smooth, np.abs(_filtfilt(wide, x))), 0.0, None)
    power = _filtfilt(narrow, x) ** 2

    env = _scale(env.reshape(n_frames, hop).mean(axis=1))
    power = _scale(power.reshape(n_frames, hop).mean(axis=1))
    diff = np.diff(env, prepend=env[:1])
    feats = np.column_stack([env, diff, power])
    return np.nan_to_num(feats, nan=0.0, posinf=0.0, neginf=0.0)


# emission models

class EmissionModel(Protocol):
    def likelihoods(self, features: np.ndarray) -> np.ndarray:
        """Map ``n_frames x n_features`` to ``n_frames x 4`` positive scores."""


@dataclasses.dataclass
class EnvelopeEmissionModel:
    """Default, training-free emission model.

    Treats the square root of the 25-150 Hz band-power channel as a sound
    activity level ``a`` and scores ``p = sigmoid(gain * (a - threshold))``
    for the sound states (S1, S2) and ``1 - p`` for the silent ones. Which
    sound is S1 is left to the duration prior (systole is shorter than
    diastole).
    """

    threshold: float = 0.35
    gain: float = 12.0
    channel: int = 2

    def likelihoods(self, features):
        a = np.sqrt(np.clip(np.asarray(features)[:, self.channel], 0.0, None))
        p = 1.0 / (1.0 + np.exp(-self.gain * (a - self.threshold)))
        out = np.column_stack([p, 1 - p, p, 1 - p])
        return np.maximum(out, LIKELIHOOD_FLOOR)


@dataclasses.dataclass
class LogisticEmissionModel:
    """Multinomial logistic regression over frame features.

    Posteriors are divided by the training state frequencies, giving scaled
    likelihoods ``P(features | state)`` up to a per-frame constant.
    """

    classifier: object
    priors: np.ndarray

    def predict_proba(self, features):
        return self.classifier.predict_proba(_expand(features))

    def likelihoods(self, features):
        post = self.predict_proba(features)
        return np.maximum(post / self.priors, LIKELIHOOD_FLOOR)

    def accuracy(self, features, states) -> float:
        return float(np.mean(self.predict_proba(features).argmax(axis=1) == np.asarray(states)))


def _expand(features):
    f = np.asarray(features, dtype=np.float64)
    return np.column_stack([f, np.sqrt(np.abs(f))])


def fit_default_emissions(features, states, max_iter: int = 500) -> LogisticEmissionModel:
    """Fit a :class:`LogisticEmissionModel` to labelled frames.

    Raises :class:`FitError` if a state is missing from ``states`` or if the
    fitted model is no better than always predicting the majority state.
    """
    from sklearn.linear_model import LogisticRegression

    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(states, dtype=int)
    if len(f) != len(y):
        raise FitError("features and states differ in length")
    counts = np.bincount(y, minlength=4)
    if counts.size != 4 or np.any(counts == 0):
        missing = [HeartState(s).name for s in range(4) if s >= counts.size or counts[s] == 0]
        raise FitError(f"states missing from training labels: {missing}")
    clf = LogisticRegression(C=1e4, max_iter=max_iter)
    clf.fit(_expand(f), y)
    model = LogisticEmissionModel(classifier=clf, priors=counts / counts.sum())
    acc = model.accuracy(f, y)
    majority = counts.max() / counts.sum()
    if not acc > majority:
        raise FitError(f"emission model accuracy {acc:.3f} does not beat majority rate {majority:.3f}")
    return model


# decoding

def _duration_tables(prior: DurationPrior, frame_rate: float):
    mean, std, dmin, dmax = prior.in_frames(frame_rate)
    full, cens = [], []
    for s in range(4):
        d = np.arange(1, dmax[s] + 1)
        f = -0.5 * ((d - mean[s]) / std[s]) ** 2
        f[d < dmin[s]] = -np.inf
        full.append(f)
        # best achievable full duration d' >= d
        cens.append(np.maximum.accumulate(f[::-1])[::-1])
    return full, cens, dmax


def score_runs(runs, log_lik, prior: DurationPrior, frame_rate: float, open_ends: bool = True) -> float:
    """Objective value of a run-length path (``-inf`` when illegal)."""
    log_lik = np.asarray(log_lik, dtype=np.float64)
    full, cens, dmax = _duration_tables(prior, frame_rate)
    if sum(d for _, d in runs) != len(log_lik) or not runs:
        return -np.inf
    total = 0.0
    t = 0
    for i, (s, d) in enumerate(runs):
        s = int(s)
        if i > 0 and s != (int(runs[i - 1][0]) + 1) % 4:
            return -np.inf
        if d < 1 or d > dmax[s]:
            return -np.inf
        edge = open_ends and (i == 0 or i == len(runs) - 1)
        total += (cens if edge else full)[s][d - 1]
        total += log_lik[t:t + d, s].sum()
        t += d
    return float(total)


def hsmm_decode(likelihoods, prior: DurationPrior | None = None, frame_rate: float = FRAME_RATE,
                sample_rate: int = CANONICAL_RATE, open_ends: bool = True) -> StateSequence:
    """Most probable cyclic state path under explicit duration constraints.

    ``likelihoods`` is ``n_frames x 4`` (S1, systole, S2, diastole). See the
    module docstring for the objective being maximised.
    """
    prior = prior or DurationPrior.default()
    lik = np.asarray(likelihoods, dtype=np.float64)
    if lik.ndim != 2 or lik.shape[1] != 4:
        raise DecodeError(f"likelihoods must be n_frames x 4, got {lik.shape}")
    n = len(lik)
    log_lik = np.log(np.maximum(lik, LIKELIHOOD_FLOOR))
    cum = np.vstack([np.zeros((1, 4)), np.cumsum(log_lik, axis=0)])
    full, cens, dmax = _duration_tables(prior, frame_rate)
    start_tab = cens if open_ends else full

    # best[t, s]: best score of frames [0, t) ending with a complete run of s
    best = np.full((n + 1, 4), -np.inf)
    back = np.zeros((n + 1, 4), dtype=int)
    final = np.full(4, -np.inf)
    final_d = np.zeros(4, dtype=int)
    for t in range(1, n + 1):
        for s in range(4):
            top = min(dmax[s], t)
            d = np.arange(1, top + 1)
            a = t - d
            emis = cum[t, s] - cum[a, s]
            prev = best[a, (s - 1) % 4]
            cand = prev + full[s][:top] + emis
            if top == t:
                cand[-1] = start_tab[s][t - 1] + emis[-1]
            k = int(np.argmax(cand))
            best[t, s], back[t, s] = cand[k], d[k]
            if t == n:
                end_tab = cens if open_ends else full
                cand_end = prev + end_tab[s][:top] + emis
                if top == t:
                    cand_end[-1] = (cens if open_ends else full)[s][t - 1] + emis[-1]
                k = int(np.argmax(cand_end))
                final[s], final_d[s] = cand_end[k], d[k]

    s = int(np.argmax(final))
    if not np.isfinite(final[s]):
        raise DecodeError(f"no state path satisfies the duration bounds over {n} frames")
    runs = []
    t, d = n, final_d[s]
    while True:
        runs.append((HeartState(s), int(d)))
        t -= d
        if t == 0:
            break
        s = (s - 1) % 4
        d = back[t, s]
    runs.reverse()
    states = runs_to_states(runs)
    frames = onset_frames(states)
    hop = sample_rate / frame_rate
    return StateSequence(frame_rate=frame_rate, states=states,
                         s1_onsets=np.round(frames * hop).astype(int), sample_rate=sample_rate)


def segment_states(rec: PcgRecording, model: EmissionModel | None = None,
                   prior: DurationPrior | None = None, frame_rate: float = FRAME_RATE) -> StateSequence:
    """Features, emissions and decoding for one recording."""
    model = model or EnvelopeEmissionModel()
    prior = prior or DurationPrior.default()
    if rec.duration < sum(prior.mean):
        raise TooShort(f"{rec.id}: {rec.duration:.2f} s is shorter than one mean heart cycle")
    feats = compute_envelope_features(rec, frame_rate)
    return hsmm_decode(model.likelihoods(feats), prior, frame_rate, sample_rate=rec.sample_rate)


def extract_segments(rec: PcgRecording, seq: StateSequence | Sequence[int], T: float = 3.0) -> list[Segment]:
    """One ``T``-second segment per S1 onset that has ``T`` seconds of signal left.

    If no onset has enough signal after it, the first onset's segment is
    zero-padded to full length instead, so every recording yields at least
    one segment.
    """
    onsets = np.asarray(getattr(seq, "s1_onsets", seq), dtype=int)
    if onsets.size == 0:
        raise SegmentationEmpty(f"{rec.id}: no S1 onsets detected")
    length = int(round(T * rec.sample_rate))
    x = rec.samples
    segs = [
        Segment(rec.id, int(o), x[o:o + length].copy(), rec.label, rec.quality)
        for o in onsets if o + length <= len(x)
    ]
    if not segs:
        o = int(onsets[0])
        buf = np.zeros(length)
        tail = x[o:o + length]
        buf[: len(tail)] = tail
        segs = [Segment(rec.id, o, buf, rec.label, rec.quality, padded=True)]
    return segs


def segment_recording(rec: PcgRecording, T: float = 3.0, model: EmissionModel | None = None,
                      prior: DurationPrior | None = None, frame_rate: float = FRAME_RATE) -> list[Segment]:
    return extract_segments(rec, segment_states(rec, model, prior, frame_rate), T)


# annotation / dump files

def read_annotations(path: str | Path) -> dict[str, np.ndarray]:
    """``record_id,frame_index,state`` CSV to per-record state arrays."""
    rows: dict[str, dict[int, int]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != ["record_id", "frame_index", "state"]:
            raise ValueError("annotation header must be record_id,frame_index,state")
        for row in reader:
            code = row["state"].strip().upper()
            if code not in STATE_CODES:
                raise ValueError(f"unknown state {row['state']!r}")
            rows.setdefault(row["record_id"], {})[int(row["frame_index"])] = int(STATE_CODES[code])
    out = {}
    for rid, frames in rows.items():
        n = max(frames) + 1
        if len(frames) != n:
            raise ValueError(f"{rid}: annotation frames are not contiguous from 0")
        out[rid] = np.array([frames[i] for i in range(n)])
    return out


def write_annotations(path: str | Path, annotations: dict[str, Sequence[int]]) -> None:
    names = {v: k for k, v in STATE_CODES.items()}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "frame_index", "state"])
        for rid, states in annotations.items():
            for i, s in enumerate(states):
                w.writerow([rid, i, names[HeartState(int(s))]])


def write_onsets(path: str | Path, onsets: dict[str, Sequence[int]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "onset_sample"])
        for rid, values in onsets.items():
            for o in values:
                w.writerow([rid, int(o)])


def read_onsets(path: str | Path) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["record_id"], []).append(int(row["onset_sample"]))
    return out
