"""Spatially-adaptive pixelwise networks for fast image-to-image translation.

A low-resolution convolutional hypernetwork predicts a coarse grid of MLP
parameters; the grid is replicated to full resolution and every pixel is
synthesized by its own small MLP fed with the pixel value and a sinusoidal
encoding of its position.
"""

from asapnet.errors import ConfigurationError, DataError, FormatError, UsageError
from asapnet.generator import AblationMode, Generator, generator_backward, generator_forward
from asapnet.hypernet import GeneratorConfig, compute_factors

__all__ = [
    "AblationMode",
    "ConfigurationError",
    "DataError",
    "FormatError",
    "Generator",
    "GeneratorConfig",
    "UsageError",
    "compute_factors",
    "generator_backward",
    "generator_forward",
]
