"""Recognition and translation for gesture feature sequences."""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad  # noqa: F401
