"""Shape elasto-plastic particle systems with learned dynamics.

Subpackages cover the full pipeline: a ground-truth material-point simulator
(:mod:`gripmold.worldsim`), particle sampling from occluded synthetic point
clouds (:mod:`gripmold.perception`), a graph-network dynamics model
(:mod:`gripmold.graphnet`) trained with correspondence-free set losses
(:mod:`gripmold.losses`, :mod:`gripmold.training`), and a model-predictive
grip planner (:mod:`gripmold.planner`).
"""

from . import errors
from .tensor import Tape, Value, finite_diff_check

__version__ = "0.1.0"

__all__ = ["Tape", "Value", "finite_diff_check", "errors", "__version__"]
