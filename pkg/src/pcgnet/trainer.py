"""Subject-disjoint splits, Adam training with the SeSp loss, and stitching."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import segmentation
from .errors import DataError, PredictError, ShapeError, SplitError, StitchError, TrainError
from .features import MfccConfig, MfccExtractor, MfccHeatMap, NormalizationStats, segment_to_heatmap, standardize
from .pcg_io import Label, PcgRecording
from .sesp_loss import LabeledBatch, l2_penalty, sesp_loss
from .tensor_nn import Architecture, Mode, NetworkParams, init_params, network_backward, network_forward

logger = logging.getLogger(__name__)


@dataclasses.dataclass
class Hyperparams:
    learning_rate: float = 0.00015822
    l2_lambda: float = 0.000076253698849
    keep_prob: float = 0.85565561
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    warmup_steps: int = 20  # linear learning-rate ramp over the first optimizer steps
    center_output: bool = True  # zero the median initial logit gap on the training maps

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.keep_prob <= 1:
            raise ValueError("keep_prob must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be non-negative")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclasses.dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw) -> "AdamState":
        tensors = getattr(params, "tensors", params)
        return cls(m={k: np.zeros_like(v) for k, v in tensors.items()},
                   v={k: np.zeros_like(v) for k, v in tensors.items()}, **kw)


def adam_step(params, grads: dict[str, np.ndarray], state: AdamState, lr: float):
    """One bias-corrected Adam update, applied in place.

    Returns ``(params, state)`` for convenience.
    """
    tensors = getattr(params, "tensors", params)
    for k, g in grads.items():
        if g.shape != tensors[k].shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter {tensors[k].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, g in grads.items():
        p = tensors[k]
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state


# splitting

@dataclasses.dataclass
class SplitPlan:
    train: list[str]
    validation: list[str]
    holdout: list[str]


def _subject_key(seed: int, subject: str) -> bytes:
    return hashlib.blake2b(f"{seed}\x00{subject}".encode("utf-8"), digest_size=16).digest()


def _allocate(n: int, fractions: Sequence[float]) -> list[int]:
    # largest remainder, then guarantee one subject per non-empty split
    raw = [f * n for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    for i, f in enumerate(fractions):
        if f > 0 and counts[i] == 0:
            donor = max(range(len(counts)), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1
    return counts


def split_dataset(recordings: Sequence[PcgRecording], fractions=(0.8, 0.1, 0.1), seed: int = 0) -> SplitPlan:
    """Assign whole subjects to train / validation / holdout.

    Subjects are ordered by a seeded hash of their id and cut into
    consecutive blocks sized by ``fractions`` (two or three values summing
    to 1). Recordings follow their subject, so no subject straddles sets.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) == 2:
        fractions += (0.0,)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be two or three non-negative values summing to 1")
    subjects = sorted({r.subject_id or r.id for r in recordings})
    needed = sum(f > 0 for f in fractions)
    if len(subjects) < needed:
        raise SplitError(f"{len(subjects)} subject(s) cannot fill {needed} splits")
    subjects.sort(key=lambda s: _subject_key(seed, s))
    counts = _allocate(len(subjects), fractions)
    bounds = np.cumsum([0] + counts)
    assign = {}
    for part in range(3):
        for s in subjects[bounds[part]:bounds[part + 1]]:
            assign[s] = part
    plan = SplitPlan([], [], [])
    sets = (plan.train, plan.validation, plan.holdout)
    for r in recordings:
        sets[assign[r.subject_id or r.id]].append(r.id)
    return plan


# training

@dataclasses.dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_se: float
    val_sp: float
    val_score: float


@dataclasses.dataclass
class TrainResult:
    params: NetworkParams
    last: NetworkParams
    log: list[EpochLog]
    best_epoch: int


LOG_HEADER = ("epoch", "train_loss", "val_se", "val_sp", "val_score")


def batch_schedule(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle ``range(n)`` and cut it into consecutive batches; the short tail is kept."""
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _as_arrays(maps: Sequence[MfccHeatMap], what: str):
    if len(maps) == 0:
        raise TrainError(f"{what} set is empty")
    labels = []
    for m in maps:
        if m.label is Label.NORMAL:
            labels.append(0)
        elif m.label is Label.ABNORMAL:
            labels.append(1)
        else:
            raise TrainError(f"{what} map from {m.source_id!r} has no label")
    x = np.stack([m.values for m in maps]).astype(np.float32)[:, None]
    return x, np.asarray(labels)


def predict_proba(x: np.ndarray, params: NetworkParams, batch_size: int = 256) -> np.ndarray:
    """Eval-mode class probabilities for a stack of standardised maps."""
    out = [network_forward(x[i:i + batch_size], params, Mode.EVAL)[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out).astype(np.float64)


def hard_se_sp(probs: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    pred = np.argmax(probs, axis=1)
    ab, no = labels == 1, labels == 0
    se = float(np.mean(pred[ab] == 1)) if ab.any() else 1.0
    sp = float(np.mean(pred[no] == 0)) if no.any() else 1.0
    return se, sp


def center_output_bias(params: NetworkParams, x: np.ndarray, batch_size: int = 256) -> float:
    """Shift ``out.b[1]`` so the median eval-mode logit gap on ``x`` is zero.

    With ReLU features feeding the output layer, a fresh network tends to
    put every map on one side of the decision boundary. The SeSp loss only
    passes gradient through correctly classified rows, so such a start can
    lock in a single-class predictor. Returns the applied shift.
    """
    gaps = []
    for i in range(0, len(x), batch_size):
        logits = network_forward(x[i:i + batch_size], params, Mode.EVAL)[1].logits
        gaps.append(logits[:, 1] - logits[:, 0])
    shift = float(np.median(np.concatenate(gaps)))
    params.tensors["out.b"][1] -= shift
    return shift


def _lr_at(step: int, hyper: Hyperparams) -> float:
    if hyper.warmup_steps <= 0:
        return hyper.learning_rate
    return hyper.learning_rate * min(1.0, (step + 1) / hyper.warmup_steps)


def _append_log(path, row: EpochLog):
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(LOG_HEADER)
        w.writerow([row.epoch, f"{row.train_loss:.8f}", f"{row.val_se:.6f}", f"{row.val_sp:.6f}", f"{row.val_score:.6f}"])


def train(train_maps: Sequence[MfccHeatMap], val_maps: Sequence[MfccHeatMap], hyper: Hyperparams | None = None,
          arch: Architecture | None = None, log_path: str | Path | None = None,
          on_epoch: Callable[[EpochLog], None] | None = None) -> TrainResult:
    """Train the CNN on labelled (raw, unstandardised) heat maps.

    Normalisation statistics are fitted on ``train_maps`` alone and stored in
    the returned parameters. Batches are drawn uniformly from the shuffled
    training set with no class reweighting. The parameters with the best
    validation ``(Se + Sp) / 2`` (hard, per segment) are returned; training
    stops after ``patience`` epochs without improvement.
    """
    hyper = hyper or Hyperparams()
    if arch is None:
        rows, cols = train_maps[0].values.shape if len(train_maps) else (6, 300)
        arch = Architecture(input_shape=(1, rows, cols))
    train_std, stats = standardize(train_maps)
    val_std, _ = standardize(val_maps, stats) if len(val_maps) else ([], stats)
    x_tr, y_tr = _as_arrays(train_std, "training")
    x_va, y_va = _as_arrays(val_std, "validation")
    return _fit(x_tr, y_tr, x_va, y_va, stats, hyper, arch, log_path, on_epoch)


def _fit(x_tr, y_tr, x_va, y_va, stats: NormalizationStats, hyper: Hyperparams, arch: Architecture,
         log_path=None, on_epoch=None) -> TrainResult:
    rng = np.random.default_rng(hyper.seed)
    params = init_params(arch, seed=hyper.seed, dtype=np.float32)
    params.norm_stats = stats
    params.hyper = hyper.to_dict()
    if hyper.center_output:
        shift = center_output_bias(params, x_tr)
        logger.info("output bias centred by %.4f", shift)
    state = AdamState.zeros_like(params)
    one_hot = np.eye(2)[y_tr]

    log: list[EpochLog] = []
    best, best_score, best_epoch, stale = params.copy(), -np.inf, -1, 0
    for epoch in range(hyper.max_epochs):
        losses, weights = [], []
        for idx in batch_schedule(len(x_tr), hyper.batch_size, rng):
            _, trace = network_forward(x_tr[idx], params, Mode.TRAIN, rng, hyper.keep_prob)
            batch = LabeledBatch(logits=trace.logits.astype(np.float64), one_hot=one_hot[idx])
            report = sesp_loss(batch, params, hyper.l2_lambda)
            grads = network_backward(trace, report.logit_gradient.astype(np.float32))
            for k, g in l2_penalty(params, hyper.l2_lambda)[1].items():
                grads[k] += g
            adam_step(params, grads, state, _lr_at(state.t, hyper))
            losses.append(report.total)
            weights.append(len(idx))
        train_loss = float(np.average(losses, weights=weights))
        se, sp = hard_se_sp(predict_proba(x_va, params), y_va)
        row = EpochLog(epoch, train_loss, se, sp, (se + sp) / 2)
        log.append(row)
        if log_path is not None:
            _append_log(log_path, row)
        if on_epoch is not None:
            on_epoch(row)
        logger.info("epoch %d loss %.4f val Se %.4f Sp %.4f score %.4f", epoch, train_loss, se, sp, row.val_score)
        if row.val_score > best_score:
            best, best_score, best_epoch, stale = params.copy(), row.val_score, epoch, 0
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    return TrainResult(params=best, last=params, log=log, best_epoch=best_epoch)


# prediction

@dataclasses.dataclass
class RecordingPrediction:
    record_id: str
    segment_probabilities: np.ndarray
    probabilities: np.ndarray
    label: Label

    @property
    def code(self) -> str:
        return "a" if self.label is Label.ABNORMAL else "n"


def stitch_prediction(segment_probabilities, record_id: str = "") -> RecordingPrediction:
    """Average per-segment class probabilities; the larger mean wins, ties go to normal."""
    p = np.asarray(segment_probabilities, dtype=np.float64).reshape(-1, 2)
    if len(p) == 0:
        raise StitchError("cannot stitch an empty list of segment predictions")
    mean = p.mean(axis=0)
    label = Label.ABNORMAL if mean[1] > mean[0] else Label.NORMAL
    return RecordingPrediction(record_id, p, mean, label)


@dataclasses.dataclass
class Pipeline:
    """Settings shared by featurisation and prediction."""

    mfcc: MfccConfig = dataclasses.field(default_factory=MfccConfig)
    rate: int = 2000
    emission_model: object = None
    prior: segmentation.DurationPrior | None = None

    def __post_init__(self):
        self._extractor = MfccExtractor(self.mfcc, self.rate)

    def segments(self, rec: PcgRecording):
        return segmentation.segment_recording(rec, self.mfcc.segment_length, self.emission_model, self.prior)

    def heatmaps(self, rec: PcgRecording) -> list[MfccHeatMap]:
        return [segment_to_heatmap(s, extractor=self._extractor) for s in self.segments(rec)]


def predict_recording(rec: PcgRecording, params: NetworkParams, cfg: Pipeline | None = None) -> RecordingPrediction:
    """Segment, featurise, standardise and classify one recording."""
    if params.norm_stats is None:
        raise PredictError("parameters carry no normalisation statistics")
    cfg = cfg or Pipeline()
    try:
        maps = cfg.heatmaps(rec)
    except DataError as exc:
        raise PredictError(f"{rec.id}: {exc}") from exc
    std, _ = standardize(maps, params.norm_stats)
    x = np.stack([m.values for m in std])[:, None]
    return stitch_prediction(predict_proba(x, params), record_id=rec.id)


def featurize_recordings(recs: Sequence[PcgRecording], cfg: Pipeline | None = None,
                         skip_errors: bool = True) -> list[MfccHeatMap]:
    """Heat maps of every segment of every recording, in input order."""
    cfg = cfg or Pipeline()
    maps = []
    for r in recs:
        try:
            maps.extend(cfg.heatmaps(r))
        except DataError as exc:
            if not skip_errors:
                raise
            logger.warning("skipping %s: %s", r.id, exc)
    return maps
