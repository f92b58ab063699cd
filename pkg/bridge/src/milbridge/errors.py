"""Bridge error taxonomy."""


class BridgeError(Exception):
    """Base class for extraction failures."""


class SlideError(BridgeError):
    """The slide file cannot be opened or decoded."""


class EmptySlideError(BridgeError):
    """Segmentation found no tissue on the slide."""


class BackboneError(BridgeError):
    """Unknown backbone id or invalid backbone configuration."""


class WeightLoadError(BridgeError):
    """Pretrained weights are unavailable in this environment."""
