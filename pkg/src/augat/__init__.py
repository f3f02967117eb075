"""Image augmentation for adversarial training: Cropshift, the four-layer IDBH pipeline,
a numpy CNN, PGD training and the hardness / diversity measurement suite."""

__version__ = "0.1.0"
