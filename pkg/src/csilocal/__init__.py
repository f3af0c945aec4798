"""Split federated CSI-feedback training: models, protocol, pipeline, accounting."""

from .model import BoundaryDims, CsiDims, build_model, init_params, nmse_loss, param_counts
from .optim import AdamConfig
from .pipeline import PipelineConfig, StageCostModel
from .protocol import CommLedger, FleetConfig, csilocal_comm_closed_form, train_csilocal
from .baselines import BaselineSpec, baseline_comm_closed_form, train_baseline

__version__ = "0.1.0"

__all__ = [
    "AdamConfig", "BaselineSpec", "BoundaryDims", "CommLedger", "CsiDims",
    "FleetConfig", "PipelineConfig", "StageCostModel",
    "baseline_comm_closed_form", "build_model", "csilocal_comm_closed_form",
    "init_params", "nmse_loss", "param_counts", "train_baseline", "train_csilocal",
]
