"""
FluxAI Tests Package

Test suite for FluxAI Gateway components.
"""

# This file makes the tests directory a Python package
