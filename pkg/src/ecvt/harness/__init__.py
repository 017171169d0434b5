"""Synthetic data, configuration, training, checkpoints, ablation and CLI."""
