"""Exception hierarchy shared across the package."""


class WmlabError(Exception):
    """Base class for all domain errors raised by wmlab."""


class MissingFileError(WmlabError):
    """Input file does not exist."""


class UnsupportedImageError(WmlabError):
    """Image exists but is not 8-bit RGB without alpha."""


class CorruptStreamError(WmlabError):
    """Image stream is truncated or undecodable."""


class UnwritablePathError(WmlabError):
    """Output path cannot be written."""


class ColorSpaceError(WmlabError):
    """Operation applied to an image in the wrong color space."""


class GeometryError(WmlabError):
    """Image too small or dimensions inconsistent with the operation."""


class KeyFormatError(WmlabError):
    """Watermark key document is malformed."""


class DegenerateSpectrumError(WmlabError):
    """Spectrum has too little structure to fit a spectral prior."""


class TrainingDivergedError(WmlabError):
    """Shrinkage training produced a non-finite loss."""

    def __init__(self, message, last_model=None):
        super().__init__(message)
        self.last_model = last_model


class RefinerError(WmlabError):
    """Base class for refiner stage failures."""


class RefinerProcessError(RefinerError):
    """External refiner exited nonzero."""


class RefinerOutputError(RefinerError):
    """External refiner wrote no output or an ill-sized image."""


class RefinerTimeoutError(RefinerError):
    """External refiner exceeded its time budget."""


class PipelineConfigError(WmlabError):
    """Attack pipeline configuration is invalid."""


class PipelineStageError(WmlabError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class BenchConfigError(WmlabError):
    """Benchmark configuration is invalid."""
