"""Anatomical implicit face models.

Learns an actor-specific ensemble of coordinate MLPs that reconstructs a
blendshape set through a bone/thickness/normal decomposition, then fits the
trained model to 3D or 2D targets, retargets performances between actors,
and supports anatomy-based mesh editing.
"""

__version__ = "0.1.0"
