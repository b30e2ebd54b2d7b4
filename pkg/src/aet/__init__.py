"""Self-supervised image features learned by predicting sampled homographies."""

from .config import RunConfig, load_config
from .model import AetHead, Encoder, NinConfig, ProbeSpec, aet_forward
from .xform import Homography, XformConfig, compose, invert, sample

__version__ = "0.1.0"

__all__ = [
    "AetHead", "Encoder", "Homography", "NinConfig", "ProbeSpec", "RunConfig", "XformConfig",
    "aet_forward", "compose", "invert", "load_config", "sample",
]
