"""Recognizing who is wearing a head-mounted camera from its motion.

Sparse optical-flow grids over short walking windows feed two classifier
back ends (LPC descriptor + RBF-SVM, and a temporal CNN); per-window
predictions are fused over a whole video and evaluated with CMC/ROC/EER.
"""

__version__ = "0.1.0"

from .errors import EgogaitError, FormatError, ManifestError, ProtocolError

__all__ = [
    "EgogaitError",
    "FormatError",
    "ManifestError",
    "ProtocolError",
    "__version__",
]
