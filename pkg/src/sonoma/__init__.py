"""Distributed network measurement orchestration: agents, management layer, result store and CLI."""
from __future__ import annotations

__version__ = "0.1.0"
