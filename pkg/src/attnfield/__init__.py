"""Attention-conditioned neural radiance field with differentiable volume
rendering and a ranked source-view evaluation protocol."""

__version__ = "0.1.0"
