"""Neural contextual bandits with greedy and Thompson-Sampling policies."""

__version__ = "0.1.0"
