"""Hierarchical audio-visual-proprioceptive fusion for diffusion-policy imitation."""

__version__ = "0.1.0"
