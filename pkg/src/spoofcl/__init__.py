"""Two-stage contrastive spoofing detector on a numpy autodiff engine."""

from .backbone import BackboneConfig, ContrastiveModel, Encoder, parameter_count
from .config import RunConfig, load_config
from .metrics import compute_eer

__version__ = "0.1.0"

__all__ = ["BackboneConfig", "ContrastiveModel", "Encoder", "RunConfig", "compute_eer",
           "load_config", "parameter_count"]
