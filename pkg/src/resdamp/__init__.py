"""Grey-box resonance analysis and damping control toolkit.

Library + CLI for desk-scale stability work on converter-dominated weak
grids: terminal frequency sweeps of black-box devices, coupled two-channel
admittance assembly, Bode-criterion resonance verdicts, damping-control
tuning, and fixed-step time-domain verification.
"""

__version__ = "0.1.0"

from .freqcore import (
    FrequencyGrid,
    FrequencyResponse,
    RationalTF,
    eval_tf,
    rational_fit,
    shift_s2,
    tf_poles,
)
from .plant import ControllerParams, GridParams, PlantParams, SealedController

__all__ = [
    "FrequencyGrid",
    "FrequencyResponse",
    "RationalTF",
    "eval_tf",
    "shift_s2",
    "tf_poles",
    "rational_fit",
    "GridParams",
    "PlantParams",
    "ControllerParams",
    "SealedController",
    "__version__",
]
