"""Lesion-Net: coordinate channels + residual U-Net + Dice/cross-entropy loss, in numpy."""
from .network import LesionNet, NetworkConfig, build_network, parameter_count
from .tensor import precision, set_default_dtype

__all__ = ["LesionNet", "NetworkConfig", "build_network", "parameter_count",
           "precision", "set_default_dtype"]
__version__ = "0.1.0"
