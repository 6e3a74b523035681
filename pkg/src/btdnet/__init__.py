"""Multimodal variable-length 3D-volume classifier and its training pipeline."""

__version__ = "0.1.0"

from .config import Config, load_config  # noqa: F401
from .data import MODALITIES, Modality, Scan, Volume  # noqa: F401
