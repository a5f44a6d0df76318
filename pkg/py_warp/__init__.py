"""Provides the core functionality for the py_warp package."""
