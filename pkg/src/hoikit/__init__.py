"""Desk-scale human-object interaction detection with semantic query
initialization, trained and evaluated on a deterministic synthetic benchmark."""

__version__ = "0.1.0"
