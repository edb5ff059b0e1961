"""Multi-sensor masked-autoencoder toolkit for remote sensing imagery.

Spectral groups from several sensors at different ground sampling distances
are embedded per band, pooled per group, positioned with superpositional
sine-cosine encodings and fed to one transformer.  See the README for a tour.
"""
from .encodings import EncodingParams, compose
from .errors import USatError, ValidationError
from .geometry import GeometryConfig, make_geometry, sequence_length, usatlas_geometry, validate_config
from .masking import MaskPlan, sample_masks
from .metrics import average_precision, macro_ap, micro_ap
from .model import PRESETS, DecoderConfig, EncoderConfig, ModelSpec, USatModel

__version__ = "0.1.0"

__all__ = [
    "DecoderConfig",
    "EncoderConfig",
    "EncodingParams",
    "GeometryConfig",
    "MaskPlan",
    "ModelSpec",
    "PRESETS",
    "USatError",
    "USatModel",
    "ValidationError",
    "average_precision",
    "compose",
    "macro_ap",
    "make_geometry",
    "micro_ap",
    "sample_masks",
    "sequence_length",
    "usatlas_geometry",
    "validate_config",
]
