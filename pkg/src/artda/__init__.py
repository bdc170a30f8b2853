"""Consistency training with random and adversarial spatial transformations.

A small numpy autodiff engine, a RandAugment-style op library, an affine
spatial transformer with gradient reversal, and an SGD trainer for domain
adaptation (DA) and domain generalization (DG) on synthetic or on-disk images.
"""

from .tensor import Tensor, grad_reverse, set_default_dtype, stop_gradient

__version__ = "0.1.0"

__all__ = ["Tensor", "grad_reverse", "set_default_dtype", "stop_gradient", "__version__"]
