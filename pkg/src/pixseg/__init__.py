"""Self-supervised pixel embeddings guided by a frozen vision-language encoder."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
