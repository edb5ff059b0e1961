from .usat import (
    PRESETS,
    DecoderConfig,
    EncoderConfig,
    ModelSpec,
    USatModel,
    classify,
    decode_and_reconstruct,
    encode,
    init_params,
    mae_loss,
)

__all__ = [
    "PRESETS",
    "DecoderConfig",
    "EncoderConfig",
    "ModelSpec",
    "USatModel",
    "classify",
    "decode_and_reconstruct",
    "encode",
    "init_params",
    "mae_loss",
]
