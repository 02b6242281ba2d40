"""Capsule + spatiotemporal attention gaze estimation on a toy autodiff core."""

__version__ = "0.1.0"
