"""Event detection for multi-label capsule-endoscopy probability streams.

The package turns per-frame class probabilities from several backbones and
heads into temporal event predictions: class-wise weighted fusion, temperature
calibration, threshold tuning, anatomy-constrained decoding and temporal mAP
evaluation. A seeded synthetic corpus generator makes the whole pipeline
runnable without real data.
"""

__version__ = "0.1.0"
