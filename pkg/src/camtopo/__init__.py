"""Joint camera-network topology inference and person re-identification."""

__version__ = "0.1.0"
