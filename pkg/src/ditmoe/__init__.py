"""Sparse mixture-of-experts diffusion transformers on a numpy autodiff core."""

from ditmoe.tensor import Tensor, ShapeError, backward, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "ShapeError", "backward", "no_grad", "__version__"]
