"""Leverage-based membership-vulnerability auditing."""

__version__ = "0.1.0"
