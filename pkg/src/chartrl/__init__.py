"""GRPO with verifiable rewards on synthetic chart question answering."""

__version__ = "0.1.0"
