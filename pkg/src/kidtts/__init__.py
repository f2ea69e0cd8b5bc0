"""Desk-scale multilingual child-voice TTS pipeline and evaluation toolkit."""

__version__ = "0.1.0"
