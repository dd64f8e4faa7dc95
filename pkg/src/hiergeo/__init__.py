"""Hierarchical geocell image geo-localization toolkit."""
