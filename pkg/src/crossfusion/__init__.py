"""Desk-scale LiDAR-camera fusion 3D detection with interleaved
cross-modal decoding and a LiDAR-corruption robustness harness."""

__version__ = "0.1.0"
