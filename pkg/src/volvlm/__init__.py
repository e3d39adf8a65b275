"""Volumetric vision-language modeling on numpy: 3D ViT + MAE, perceiver
projectors, a small decoder LM with LoRA, synthetic CT phantoms, metrics."""

__version__ = "0.1.0"
