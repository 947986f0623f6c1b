"""Learning-based shape recovery of texture-less deformable surfaces from one masked RGB image."""

__version__ = "0.1.0"
