"""Privacy-aware edge-device collaborative inference simulator and trainer."""

__version__ = "0.1.0"
