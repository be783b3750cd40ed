"""Desk-scale inverse rendering toolkit.

Recovers environment light, Cook-Torrance material parameters and a
per-Gaussian distillation-progress value from multi-view images by fitting
a hybrid renderer: a physically-based deferred shading path blended with a
raw spherical-harmonic radiance path.
"""

__version__ = "0.1.0"
