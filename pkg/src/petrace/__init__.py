"""Privacy-preserving exposure notification: protocol core and simulator."""

__version__ = "0.1.0"
