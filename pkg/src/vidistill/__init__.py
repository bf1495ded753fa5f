"""Few-step video diffusion distillation at toy scale.

Adaptive regression loss, clipped temporal regularization, distribution
matching, half-frame-rate sampling with a latent interpolator, and the
corpus filtering pipeline, all runnable on synthetic sprite videos.
"""

__version__ = "0.1.0"
