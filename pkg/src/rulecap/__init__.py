"""Rule-driven news captioning at desk scale."""

__version__ = "0.1.0"
