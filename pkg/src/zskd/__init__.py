"""Zero-shot knowledge distillation on MNIST-family data with a small numpy autodiff engine."""
from .errors import ZSKDError

__version__ = "0.1.0"

__all__ = ["ZSKDError", "__version__"]
