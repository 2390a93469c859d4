"""Multi-label speaking-style classification: features, corpus tools, model, training, augmentation, evaluation."""

from .labels import LABELS

__version__ = "0.1.0"
__all__ = ["LABELS", "__version__"]
