"""Multi-agent highway simulator with a spatially hierarchical RL agent."""

__version__ = "0.1.0"
