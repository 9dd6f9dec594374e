"""Desk-scale transformer world models for memory-dependent control.

A numpy package with hand-written reverse-mode differentiation. Hot kernels
run under numba when available; set ``TDV3_DISABLE_NUMBA=1`` to force the
pure-numpy versions.
"""

from .config import RunConfig, memory_experiment
from .harness import evaluate, run_train
from .kernels import backend

__version__ = "0.1.0"

__all__ = ["RunConfig", "backend", "evaluate", "memory_experiment", "run_train"]
