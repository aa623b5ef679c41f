"""Accent-aware streaming speech recognition on a small NumPy autodiff core."""

from .config import Config, load_config, parse_config
from .model import Model

__all__ = ["Config", "Model", "load_config", "parse_config"]
__version__ = "0.1.0"
