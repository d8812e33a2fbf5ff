"""Domain types and configuration schemas."""
