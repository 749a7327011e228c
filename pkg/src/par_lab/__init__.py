"""Token and layer pruning laboratory built around a toy vision-language model."""

__version__ = "0.1.0"
