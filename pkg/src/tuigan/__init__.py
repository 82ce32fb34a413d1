"""Bidirectional image-to-image translation learned from two unpaired images."""

from .config import TrainConfig
from .imaging import ImagePyramid, build_pyramid, load_image, resample, save_image
from .losses import LossReport, LossWeights
from .metrics import perceptual_distance, sifid
from .networks import ScaleModule, init_scale_module
from .trainer import ChainOutputs, TuiGANModel, load_model, pyramid_forward, train_all, translate

__all__ = [
    "ChainOutputs",
    "ImagePyramid",
    "LossReport",
    "LossWeights",
    "ScaleModule",
    "TrainConfig",
    "TuiGANModel",
    "build_pyramid",
    "init_scale_module",
    "load_image",
    "load_model",
    "perceptual_distance",
    "pyramid_forward",
    "resample",
    "save_image",
    "sifid",
    "train_all",
    "translate",
]
