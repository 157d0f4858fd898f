"""Task-relevant-variable synthesis and control via an information bottleneck."""
__version__ = "0.1.0"
