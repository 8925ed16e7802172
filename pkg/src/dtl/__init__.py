"""Dual-branch transfer learning for event-camera end tasks, at desk scale."""

__version__ = "0.1.0"
