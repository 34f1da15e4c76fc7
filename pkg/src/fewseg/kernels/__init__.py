"""Backend dispatch for the hot convolution kernels."""

from ..backend import BACKEND

if BACKEND == "numba":
    from .numba_impl import (
        conv2d_forward,
        conv2d_backward_input,
        conv2d_backward_weight,
    )
else:
    from .numpy_impl import (
        conv2d_forward,
        conv2d_backward_input,
        conv2d_backward_weight,
    )

__all__ = [
    "BACKEND",
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_weight",
]
