"""End-to-end set-prediction instance segmentation at desk scale.

Subpackages: geometry (boxes, RoIAlign), codec (linear mask embeddings),
matching (composite cost + optimal assignment), losses (set loss + gradient
oracle), attention (encoder blocks), refine (recurrent refinement and the toy
trainer), io (tensor container, RLE, annotations), shapes (synthetic data),
verify (finite-difference suite), cli.
"""

__version__ = "0.1.0"
