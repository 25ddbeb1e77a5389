"""Operator kernels and their tape bindings."""
