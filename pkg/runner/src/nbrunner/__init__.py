"""Error-tolerant in-container notebook runner."""

from .shim import ShimConfig, main, run_shim

__all__ = ["ShimConfig", "main", "run_shim"]
__version__ = "0.1.0"
