"""Radiance field luminaires package.

Fits spherical harmonics voxel fields to HDR images of luminaires, distills
them into plenoctrees and renders scenes that contain them.
"""

__version__ = "0.1.0"
