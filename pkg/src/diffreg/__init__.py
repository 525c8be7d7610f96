"""Diffusion-guided deformable image registration."""
from .config import TrainConfig
from .errors import ConfigError, DiffRegError, DomainError, ShapeError
from .grid import Volume, jacobian_determinant, warp
from .network import RegistrationNet
from .pipeline import Trainer, register

__version__ = "0.1.0"

__all__ = [
    "TrainConfig",
    "ConfigError",
    "DiffRegError",
    "DomainError",
    "ShapeError",
    "Volume",
    "jacobian_determinant",
    "warp",
    "RegistrationNet",
    "Trainer",
    "register",
    "__version__",
]
