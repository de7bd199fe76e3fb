"""Aligned real/fake datasets by autoencoder reconstruction, detector training and robustness sweeps."""
from .errors import ReconAlignError, UserError
from .manifest import DatasetManifest, ImageRecord, Label

__version__ = "0.1.0"
