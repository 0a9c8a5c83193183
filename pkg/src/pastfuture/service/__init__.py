"""HTTP wrapper around a trained checkpoint."""

from .app import create_app

__all__ = ["create_app"]
