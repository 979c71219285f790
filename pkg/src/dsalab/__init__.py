"""Reference implementations of sparse attention under latent attention, indexer
training losses, a stabilized GRPO objective, and agent context management,
with brute-force and finite-difference oracles."""

__version__ = "0.1.0"
