"""Contrastive prompt-tuning lab with Aggregation-Graph-of-Thought prompts."""

__version__ = "0.1.0"
