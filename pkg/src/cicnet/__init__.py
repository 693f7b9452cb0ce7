"""Convolution-in-Convolution networks: channel-local convolution layers,
network builder, gradient checks, CIFAR ingestion and SGD training in numpy."""
from .errors import (CicError, CompatibilityError, ConfigError, DegenerateStatisticsError,
                     DivergenceError, FormatError, LabelError, NumericError, ParameterError,
                     ShapeError)
from .layers import ClcSpec, ClcWeights, clc_backward, clc_forward
from .netbuilder import NetworkConfig, build_network, preset, preset_names

__all__ = [
    "CicError", "CompatibilityError", "ConfigError", "DegenerateStatisticsError",
    "DivergenceError", "FormatError", "LabelError", "NumericError", "ParameterError",
    "ShapeError", "ClcSpec", "ClcWeights", "clc_backward", "clc_forward",
    "NetworkConfig", "build_network", "preset", "preset_names",
]
__version__ = "0.1.0"
