"""Human pose estimation from event-camera streams with graph neural networks."""

__version__ = "0.1.0"
