"""HTTP service wrapping the receiver role."""

from .app import create_app

__all__ = ["create_app"]
