"""fdlab: a desk-scale laboratory for gradient flow in two-branch fusion detectors.

The package provides a minimal reverse-mode autodiff engine, closed-form
gradient-suppression analysis for sigmoid-BCE fusion heads, a toy two-branch
detector with auxiliary per-branch heads and a binary gradient router, a
deterministic synthetic dual-modality dataset, and the training/evaluation
harness plus CLI that ties them together.
"""

__version__ = "0.1.0"
