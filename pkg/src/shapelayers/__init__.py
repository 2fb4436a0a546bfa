"""Layered amodal instance segmentation on synthetic occluded shapes.

The package covers the full desk-scale pipeline: deterministic scene
synthesis with exact two-layer ground truth, a discriminative embedding
loss with analytic gradients, a small convolutional predictor trained
from scratch, mean-shift grouping of embeddings into layer-consistent
instances, and occlusion-stratified AP/AR evaluation.
"""

__version__ = "0.1.0"
