"""Encoder bridge: turns images and concept captions into embedding files.

The bridge is a standalone adapter around a vision-language encoder chosen
by a manifest string.  It emits the engine's binary embedding format with
raw (unnormalized) encoder outputs; the engine normalizes on read.
"""

__version__ = "0.1.0"


class BridgeError(Exception):
    """Base class for bridge failures."""


class ValidationError(BridgeError):
    """Inputs or outputs violate a structural requirement."""
