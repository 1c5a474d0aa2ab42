"""Decoupled cell counting.

A counter network regresses the cell count as the l1 norm of a coarse map
computed from intermediate features (with a global message passing context
module), and a conditional localizer reconstructs a full-resolution density
map from the image and that coarse map.
"""

__version__ = "0.1.0"
