"""Masked latent pretraining and weight-transplant initialization for
desk-scale diffusion transformers, with an evaluation and ablation harness."""

__version__ = "0.1.0"
