"""Tests for ircam-nav."""
