"""Weight-space world models over coordinate-network parameters."""
from .inr import CoordinateGrid, FrequencyMask, InrArchitecture, nyquist_mask, param_count, render
from .model import ModelConfig, WorldModel, build_model

__version__ = "0.1.0"
