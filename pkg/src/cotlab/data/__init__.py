"""Bundled data files (demonstration corpus)."""
