"""Unsupervised perceptual image metric.

Trains a multi-scale stochastic image representation on pairs of adjacent
video frames and measures perceptual distance as a symmetrized KL divergence
between the per-image encoder distributions.  Ships the training objective,
the metric itself, a synthetic data generator, and an evaluation harness
(two-alternative forced choice, JND mAP, pixel-shift robustness,
equivalent-noise calibration, rank correlation).
"""

__version__ = "0.1.0"
