"""
Stereo-Inertial Odometry - Engine Package

Stereo-inertial odometry with united monocular/stereo feature tracking,
three-mode initialization, tightly coupled sliding-window optimization and
loop-closure relocation.

License: MIT
"""

__version__ = "1.0.0"
