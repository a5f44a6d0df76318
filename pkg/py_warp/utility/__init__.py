"""Provides utility functions, error types and check records for py_warp."""
