"""Minimal float64 array engine with reverse-mode differentiation and Adam."""

from .autodiff import *  # noqa: F401,F403
from .autodiff import __all__ as _ops
from .optim import AdamState, adam_step

__all__ = list(_ops) + ["AdamState", "adam_step"]
