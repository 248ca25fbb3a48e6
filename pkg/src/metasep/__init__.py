"""Meta-learned time-domain speech separation toolkit."""

__version__ = "0.1.0"

from .autodiff import ParamVector, Tensor, grad  # noqa: F401
