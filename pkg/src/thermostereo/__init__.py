"""Lightweight thermal stereo matching with dense-label distillation."""

from .config import ModelConfig, TrainConfig, config_hash
from .model import StereoOutput, ThermalStereoNet, build_model

__version__ = "0.1.0"
