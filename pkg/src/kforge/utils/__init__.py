"""Utility modules for the kforge package."""
