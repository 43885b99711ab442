"""LAPFormer: hierarchical-transformer encoder with a light CNN decoder for
polyp segmentation."""

__version__ = "0.1.0"

from .decoder import ABLATIONS, DecoderConfig, LAPDecoder
from .encoder import EncoderConfig, FeaturePyramid, MixTransformer, mit_config
from .errors import CheckpointError, ConfigError, DimensionError, UnsupportedOpError
from .model import (LAPFormer, ModelConfig, build_model, count_parameters, load_checkpoint,
                    save_checkpoint, variant_config)
from .profile import estimate_flops

__all__ = [
    "ABLATIONS", "CheckpointError", "ConfigError", "DecoderConfig", "DimensionError",
    "EncoderConfig", "FeaturePyramid", "LAPDecoder", "LAPFormer", "MixTransformer", "ModelConfig",
    "UnsupportedOpError", "build_model", "count_parameters", "estimate_flops", "load_checkpoint",
    "mit_config", "save_checkpoint", "variant_config",
]
