"""Point-feature-aware 3D Gaussian splatting for few-shot novel view synthesis.

Pure numpy, CPU-only: a tape autodiff core, a tile-based differentiable
rasterizer with a brute-force oracle, a multi-view point-feature pipeline
with variance fusion, KNN vector self-attention, MLP attribute decoders,
and a synthetic-scene workbench.
"""

from .autodiff import Tape, Tensor, backward, precision

__all__ = ["Tape", "Tensor", "backward", "precision"]
__version__ = "0.1.0"
