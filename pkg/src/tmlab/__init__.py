"""tmlab: a desk-scale laboratory for translation-memory-augmented NMT.

Everything runs on CPU with numpy: fuzzy TM retrieval over an inverted
index, tiny transformer backbones with a copy/gating head, single /
average / weighted ensemble inference, and a bias-variance estimator
over data splits.
"""

__version__ = "0.1.0"

from tmlab.errors import DataError, NumericError, UsageError

__all__ = ["DataError", "NumericError", "UsageError", "__version__"]
