"""Attention-based construction policies for routing problems, trained by
entropy-regularized policy gradients, plus classic baselines and search."""

from .routing import Instance, Kind, Solution, generate_instance, tour_length, validate

__all__ = ["Instance", "Kind", "Solution", "generate_instance", "tour_length", "validate"]
__version__ = "0.1.0"
