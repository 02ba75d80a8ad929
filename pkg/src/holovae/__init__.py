"""Rotation-equivariant (variational) autoencoders on steerable tensors."""

__version__ = "0.1.0"

from .exceptions import (  # noqa: E402
    ConfigError,
    DegenerateFrameError,
    DomainError,
    HoloError,
    ModeError,
    NumericError,
    ParseError,
    ShapeError,
    ValidationError,
)
from .model import HolographicAE, HolographicVAE, LatentCode, ModelConfig  # noqa: E402
from .so3 import CGCache, Frame, Rotation  # noqa: E402
from .steerable import DatasetNormalizer, Signature, SteerableTensor  # noqa: E402

__all__ = [
    "CGCache",
    "ConfigError",
    "DatasetNormalizer",
    "DegenerateFrameError",
    "DomainError",
    "Frame",
    "HoloError",
    "HolographicAE",
    "HolographicVAE",
    "LatentCode",
    "ModeError",
    "ModelConfig",
    "NumericError",
    "ParseError",
    "Rotation",
    "ShapeError",
    "Signature",
    "SteerableTensor",
    "ValidationError",
]
