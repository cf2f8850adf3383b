"""Multi-resolution time-frequency autoencoders and fusion classifiers for pathological speech.

Modules: ``dsp`` (images), ``nn`` and ``cae`` (autoencoders), ``classifiers``,
``evaluation`` (nested cross-validation), ``pipeline`` and ``cli``.
"""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
