#!/usr/bin/env python3
"""
Error Types
Exception hierarchy shared by the numerical core, the data layer and the CLI
"""


class SpliceRadarError(Exception):
    """Base class for all splice-radar errors"""


class DimensionError(SpliceRadarError, ValueError):
    """Shape or extent mismatch"""


class ParameterError(SpliceRadarError, ValueError):
    """Invalid scalar parameter or input contract violation"""


class ContractError(SpliceRadarError, ValueError):
    """API used outside its contract"""


class ImageIOError(SpliceRadarError, OSError):
    """Unsupported, unreadable or truncated image file"""


class CheckpointError(SpliceRadarError, OSError):
    """Checkpoint version mismatch, truncation or inconsistency"""


class CorpusError(SpliceRadarError, ValueError):
    """Corpus manifest missing or corpus unusable for training"""


class NumericError(SpliceRadarError, ArithmeticError):
    """Non-finite loss, gradient or parameter"""


class DegenerateMaskError(SpliceRadarError, ValueError):
    """Ground truth lacks the classes a score needs; the image is skipped, not zero-scored"""
