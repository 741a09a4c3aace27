"""Benchmark engine for learned representations of longitudinal coded-event data.

Patient records are modeled as ordered days of medical codes. The package
trains a recurrent language model over those sequences, extracts fixed-length
patient representations from its bottleneck layer, and measures whether they
beat count-based, word2vec, and LSI baselines for downstream risk prediction
across training-set sizes, on seeded synthetic cohorts with planted signal.
"""

__version__ = "0.1.0"

from clmbench.errors import ConfigurationError, DataError, ReproducibilityError

__all__ = [
    "ConfigurationError",
    "DataError",
    "ReproducibilityError",
    "__version__",
]
