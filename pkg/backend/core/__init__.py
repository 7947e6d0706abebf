"""Numerics, run configuration and scenario orchestration."""
