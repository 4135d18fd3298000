"""Full-video training by temporal clustering of frame activations."""

__version__ = "0.1.0"
