"""Bridge-specific exception types."""


class BridgeError(Exception):
    """Base class for bridge failures."""


class ExtractionError(BridgeError):
    """The image could not be read or encoded into a token grid."""


class EndpointError(BridgeError):
    """The generation endpoint could not be reached or returned bad data."""
