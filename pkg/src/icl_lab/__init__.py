"""Numerical lab for one-layer in-context learners and their closed-form optima."""

__version__ = "0.1.0"

from .designs import DesignSpec, EvolvingTask, Independent, Prompt, Rag, TaskFeature
from .numerics import RngStream, SpdMatrix

__all__ = [
    "DesignSpec",
    "EvolvingTask",
    "Independent",
    "Prompt",
    "Rag",
    "RngStream",
    "SpdMatrix",
    "TaskFeature",
    "__version__",
]
