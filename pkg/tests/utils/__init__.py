"""Tests for the kforge utility modules."""
