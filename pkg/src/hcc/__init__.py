"""Two-stage contrastive predictive coding for speech.

A lower stage encodes 10 ms frames and an upper stage 80 ms frames; both
are trained with an InfoNCE objective, the lower one conditioned on the
upper one's context through a repeat-and-concatenate top-down path.
Linear probes and a 1-bit delta-modulation feature codec complete the
pipeline. See README.md for the CLI.
"""

__version__ = "0.1.0"

from .kernels import backend_name

__all__ = ["backend_name", "__version__"]
