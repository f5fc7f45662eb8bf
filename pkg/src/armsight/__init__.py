"""Synthetic robot-arm perception: scene generation, multi-head CNN training
with transfer to new arm families, and evaluation tooling."""

from . import _heap

_heap.tune()

__version__ = "0.1.0"
