"""Heart-sound (phonocardiogram) classification.

Pipeline: load and resample recordings, segment them into heart cycles
with a duration-constrained semi-Markov decoder, turn 3 s segments into
MFCC heat maps, classify the maps with a small CNN trained on a
sensitivity/specificity objective, and score recording-level predictions
with quality-weighted challenge metrics.
"""

from .errors import DataError, PcgNetError
from .features import MfccConfig, MfccHeatMap
from .pcg_io import Label, PcgRecording, Quality, load_dataset, load_wav
from .scoring import ChallengeCounts, ScoreReport, challenge_score, tally
from .tensor_nn import Architecture, NetworkParams, load_checkpoint, save_checkpoint
from .trainer import Hyperparams, predict_recording, split_dataset, train

__version__ = "0.1.0"

__all__ = [
    "Architecture", "ChallengeCounts", "DataError", "Hyperparams", "Label", "MfccConfig", "MfccHeatMap",
    "NetworkParams", "PcgNetError", "PcgRecording", "Quality", "ScoreReport", "challenge_score",
    "load_checkpoint", "load_dataset", "load_wav", "predict_recording", "save_checkpoint", "split_dataset",
    "tally", "train",
]
