"""Orchestration runtime for a search-augmented image-generation agent."""

__version__ = "0.1.0"
