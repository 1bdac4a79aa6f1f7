"""Importance-guided pruning and sharing of LoRA adapters on a from-scratch numpy transformer."""

__version__ = "0.1.0"
