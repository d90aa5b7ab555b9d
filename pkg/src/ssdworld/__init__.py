"""Discrete-latent world model with a state-space-dual sequence backbone."""
from .config import RunConfig

__all__ = ["RunConfig"]
__version__ = "0.1.0"
