"""Stereo image super-resolution with parallax attention on a small numpy
autodiff engine."""
from .network import NetworkConfig, build, forward, load_model, save_model
from .train import TrainConfig

__all__ = ["NetworkConfig", "TrainConfig", "build", "forward", "load_model", "save_model"]
__version__ = "0.1.0"
