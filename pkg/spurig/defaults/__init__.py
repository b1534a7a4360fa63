"""Packaged experiment configuration."""
