"""Referring video object segmentation over frozen vision-language features.

Modules: ``tensor`` (reverse-mode engine), ``data`` (clips and synthetic
generator), ``encoder``, ``decoders``, ``matching`` (Hungarian reorder and
aggregation), ``model``, ``losses``, ``train``, ``metrics``, ``cli``.
"""
from .data import FeatureClip, SyntheticSpec, generate_synthetic, load_clip, save_clip
from .losses import LossConfig
from .model import ModelConfig, RVOSModel

__all__ = ["FeatureClip", "SyntheticSpec", "generate_synthetic", "load_clip", "save_clip",
           "LossConfig", "ModelConfig", "RVOSModel"]
__version__ = "0.1.0"
