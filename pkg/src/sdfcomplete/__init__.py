"""Scene completion from sparse LiDAR with a locally conditioned Eikonal SDF."""

__version__ = "0.1.0"
