"""Behavioral intelligence pipeline: event streams to journey graphs, findings, facts and grounded narratives."""

from __future__ import annotations

__version__ = "0.1.0"
