"""Exception hierarchy shared across the pipeline.

``DataError`` subclasses describe problems with input data (bad files,
inconsistent manifests, degenerate recordings). The CLI maps them to exit
code 2; everything else deriving from ``PcgNetError`` is a programming or
configuration error.
"""


class PcgNetError(Exception):
    """Base class for all package errors."""


class DataError(PcgNetError):
    """Input data cannot be processed."""


# pcg_io
class FormatError(DataError):
    pass


class UnsupportedChannels(DataError):
    pass


class UnsupportedEncoding(DataError):
    pass


class ManifestError(DataError):
    pass


# segmentation
class TooShort(DataError):
    pass


class DecodeError(DataError):
    pass


class FitError(PcgNetError):
    pass


class SegmentationEmpty(DataError):
    pass


# features
class ConfigError(PcgNetError):
    pass


class HeatMapFormatError(DataError):
    pass


# tensor_nn
class ShapeError(PcgNetError):
    pass


class TraceError(PcgNetError):
    pass


class CheckpointError(DataError):
    pass


# trainer
class SplitError(DataError):
    pass


class TrainError(DataError):
    pass


class StitchError(PcgNetError):
    pass


class PredictError(DataError):
    pass


# scoring
class TallyError(DataError):
    pass


class ScoreError(DataError):
    pass
