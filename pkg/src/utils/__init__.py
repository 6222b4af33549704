"""Utilities for artifact files and plotting."""
