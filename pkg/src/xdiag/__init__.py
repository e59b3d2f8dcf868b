"""Toolkit for diagnosing and rectifying classifiers on shared
image-text embedding spaces: gap geometry, cross-modal probes, language
slice discovery, attribute influence, and text-based rectification."""

__version__ = "0.1.0"
