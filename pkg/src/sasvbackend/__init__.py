"""Backend ensemble toolkit for spoofing-aware speaker verification.

Fuses precomputed speaker and countermeasure embeddings, trains small
DNN/CNN backends with optional attention, scores trials, evaluates
SASV/SPF/SV equal error rates, and combines multiple systems' scores.
"""

__version__ = "0.1.0"

from . import attention, data, fusion, metrics, models, score_fusion, tensor, training

__all__ = [
    "attention",
    "data",
    "fusion",
    "metrics",
    "models",
    "score_fusion",
    "tensor",
    "training",
    "__version__",
]
