"""Dense RGBD SLAM with sub-maps of 3D Gaussians, on the CPU."""

__version__ = "0.1.0"
