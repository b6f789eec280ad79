"""Hierarchical concept segmentation with confidence-driven evolving labeling.

Desk-scale pipeline: a validated concept hierarchy, a query-based mask
decoder with parent-conditioned child decoding and per-mask confidence
prediction, a four-term training loss, and an iterative pseudo-labeling
loop over procedurally generated scenes.
"""

__version__ = "0.1.0"
