"""Cycle-level speculative core simulator with CFI-informed speculation defenses."""

__version__ = "0.1.0"
