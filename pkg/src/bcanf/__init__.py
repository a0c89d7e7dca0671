"""Learned hierarchical B-frame video coding with conditional augmented normalizing flows."""
from .canf import CanfModel, FrameType
from .codec import (
    LAMBDAS,
    Bitstream,
    CodecConfig,
    CodecModels,
    ModelConfig,
    decode_sequence,
    deserialize,
    encode_sequence,
    serialize,
)
from .estimator import BCanfCodec, check_video
from .gop import plan, training_schedule
from .metrics import RdCurve, bd_rate, bpp, psnr

__version__ = "0.1.0"

__all__ = [
    "BCanfCodec",
    "Bitstream",
    "CanfModel",
    "CodecConfig",
    "CodecModels",
    "FrameType",
    "LAMBDAS",
    "ModelConfig",
    "RdCurve",
    "bd_rate",
    "bpp",
    "check_video",
    "decode_sequence",
    "deserialize",
    "encode_sequence",
    "plan",
    "psnr",
    "serialize",
    "training_schedule",
]
