"""
simreg - simulation-supervised deformable registration toolkit

Simulates ground-truth deformations, trains a displacement-field estimator
with a hybrid field-supervision + similarity loss, and applies it to
atlas-based segmentation with uncertainty and back-projection outputs.
"""

__version__ = "1.0.0"
