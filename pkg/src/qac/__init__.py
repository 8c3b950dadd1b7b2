"""Personalized query auto-completion: trie matching plus an intention-aware
neural ranker, with training, evaluation, and a batched suggest service."""

__version__ = "0.1.0"
