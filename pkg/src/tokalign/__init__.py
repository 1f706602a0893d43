"""Toy codec-token text-to-speech with classifier-free guidance and preference alignment."""

__version__ = "0.1.0"
