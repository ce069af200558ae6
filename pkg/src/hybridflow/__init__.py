"""Dense optical flow by hybrid descriptor clustering and graph matching."""

__version__ = "0.1.0"
