"""Multimodal attention-based speech recognition with visual grounding.

Everything runs on numpy: :mod:`mmasr.numcore` supplies the tensors and
reverse-mode differentiation the recognizer is built from.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, ContractError, DimensionError, DivergenceError, EmptyInputError,
                     FormatError, ManifestError, MMASRError, RangeError, ResolutionError)

__all__ = [
    "__version__", "MMASRError", "ConfigError", "ContractError", "DimensionError",
    "DivergenceError", "EmptyInputError", "FormatError", "ManifestError", "RangeError",
    "ResolutionError",
]
