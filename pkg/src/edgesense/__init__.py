"""Multi-device edge sensing with task-oriented broadcast over fading links."""

__version__ = "0.1.0"
