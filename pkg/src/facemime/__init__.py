"""One-shot face video re-enactment with hybrid identity/deformation latents."""

__version__ = "0.1.0"

from .config import RunConfig, load_run_config, make_preset
from .encoder import DualHeadEncoder, build_encoder
from .errors import (ConfigError, DataError, DivergenceError, FacemimeError,
                     ModelHealthError, ShapeError)
from .generator import StyleBasedGenerator, build_generator
from .latents import LatentPair, StyleLatent, WPlusLatent
from .metrics import MetricReport
from .reenactment import (CMAReport, EditDirection, cma_adapt, edit_identity,
                          reenact_frame, reenact_sequence)
from .training import Trainer, run_training

__all__ = [
    "__version__",
    "RunConfig", "load_run_config", "make_preset",
    "DualHeadEncoder", "build_encoder",
    "StyleBasedGenerator", "build_generator",
    "LatentPair", "StyleLatent", "WPlusLatent",
    "MetricReport",
    "CMAReport", "EditDirection", "cma_adapt", "edit_identity",
    "reenact_frame", "reenact_sequence",
    "Trainer", "run_training",
    "FacemimeError", "ConfigError", "DataError", "DivergenceError",
    "ModelHealthError", "ShapeError",
]
