"""SCAN: self-confidence saliency maps from a feature-reconstructing analysis network."""

__version__ = "0.1.0"
