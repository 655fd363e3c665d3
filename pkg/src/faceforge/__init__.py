"""faceforge: morphable-model-backed GAN for pose-disentangled face synthesis."""

__version__ = "0.1.0"
