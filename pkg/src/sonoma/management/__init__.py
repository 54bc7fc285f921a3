"""The management layer service."""
from __future__ import annotations

from .core import ManagementLayer, MLConfig

__all__ = ["ManagementLayer", "MLConfig"]
