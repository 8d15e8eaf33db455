"""Calibration-aware prompt tuning on embedding datasets.

Modules: ``gradcore`` (reverse-mode differentiation), ``model`` (frozen
encoder, prompts, zero-shot head), ``losses``, ``metrics``, ``data``,
``trainer`` and ``cli``.
"""

__version__ = "0.1.0"
