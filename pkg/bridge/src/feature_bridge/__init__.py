"""Image-to-VIBE1 feature bridge: backbone extraction and path realization."""

from feature_bridge.config import BridgeConfig
from feature_bridge.errors import BridgeError, EndpointError, ExtractionError
from feature_bridge.extract import extract, extract_batch
from feature_bridge.realize import realize_path

__all__ = [
    "BridgeConfig",
    "BridgeError",
    "EndpointError",
    "ExtractionError",
    "extract",
    "extract_batch",
    "realize_path",
]
