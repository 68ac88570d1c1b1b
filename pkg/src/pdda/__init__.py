"""Principle-guided diffusion test-time adaptation, desk scale."""
