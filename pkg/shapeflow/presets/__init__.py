"""Shipped pipeline presets."""
