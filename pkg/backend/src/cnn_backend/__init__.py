"""File-driven CNN fine-tuning backend with class-activation-mapping overlays."""

__version__ = "0.1.0"
