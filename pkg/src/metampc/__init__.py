"""Meta-learned vehicle dynamics models driving an uncertainty-aware MPPI controller."""

from .ensemble import Ensemble, EnsemblePrediction
from .mppi import AnalyticDynamics, LearnedDynamics, MPPIConfig, mppi_step
from .seqmodel import ModelConfig, ModelWeights
from .track import TrackSpec
from .vehicle import VehicleParams

__all__ = [
    "AnalyticDynamics", "Ensemble", "EnsemblePrediction", "LearnedDynamics", "MPPIConfig",
    "ModelConfig", "ModelWeights", "TrackSpec", "VehicleParams", "mppi_step",
]
