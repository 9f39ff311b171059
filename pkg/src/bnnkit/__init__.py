"""Training and inference toolkit for binary (1-bit) neural networks.

Trains networks whose weights and activations are constrained to {-1, +1}
without labels, using contrastive and teacher-guided objectives, and runs
the resulting models through bit-packed XNOR/popcount kernels.
"""

from bnnkit.accel import BACKEND, NUMBA_ENABLED

__version__ = "0.1.0"

__all__ = ["BACKEND", "NUMBA_ENABLED", "__version__"]
