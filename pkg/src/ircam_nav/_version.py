"""Version information for ircam-nav."""

__version__ = "0.1.0"
