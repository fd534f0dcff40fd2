"""Fabric model: configuration and the cycle-stepping engine."""

from .config import MB, FabricConfig, TilingError, tile_shape
from .engine import Fabric, InvariantError, LivelockError, read_event_trace

__all__ = ["MB", "Fabric", "FabricConfig", "InvariantError", "LivelockError", "TilingError",
           "read_event_trace", "tile_shape"]
