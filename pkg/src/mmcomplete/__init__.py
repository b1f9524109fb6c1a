"""Text- and image-guided point cloud completion at desk scale."""

__version__ = "0.1.0"
