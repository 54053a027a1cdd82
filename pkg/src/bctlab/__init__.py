"""Backward-compatible embedding training, indexing and evaluation at desk scale."""
from . import datagen, evalproto, gallery, heads, nncore, trainer

__all__ = ["datagen", "evalproto", "gallery", "heads", "nncore", "trainer"]
