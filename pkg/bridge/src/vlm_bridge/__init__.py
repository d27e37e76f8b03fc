"""Sidecar serving VLM gradient saliency over the engine's wire protocol."""

from .config import BridgeConfig
from .models import HfLlava, TinyVlm, load_model
from .server import BridgeServer

__version__ = "0.1.0"
