"""Weakly-aligned vision-language pretraining toolkit.

Builds an image-text corpus by embedding retrieval over non-parallel image
and text collections, links noun phrases to image regions, and trains a
single-stream fusion transformer with masked-prediction and image-text
matching objectives under a weighted curriculum.
"""

__version__ = "0.1.0"
