"""Foresighted packet scheduling for delay-sensitive, interdependent data units."""

__version__ = "0.1.0"
