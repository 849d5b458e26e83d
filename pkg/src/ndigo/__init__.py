"""Discovery agents driven by predictive information gain."""

__version__ = "0.1.0"
