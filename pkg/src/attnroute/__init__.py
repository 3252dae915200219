"""Attention-based construction policies for routing problems, trained with REINFORCE."""

__version__ = "0.1.0"
