"""Predicted occupancy grids for traffic scenes.

Modules: :mod:`grid` (grid types, quantization, metrics, files),
:mod:`scenario` (simulator and datasets), :mod:`autoencoder`, :mod:`forest`,
:mod:`deconvnet`, :mod:`pipelines` (the three estimators) and :mod:`cli`.
"""

from .grid import (AugmentedOccupancyGrid, BandedError, GridConfig, PredictedOccupancyGrid,
                   QuantizedPog, banded_pog_error, pog_error, quantize_probability)
from .pipelines import ArchitectureId, TrainedPredictor, evaluate, predict
from .scenario import RoadLayout, Scenario, TrafficParticipant, compute_ground_truth_pog

__version__ = "0.1.0"

__all__ = [
    "ArchitectureId", "AugmentedOccupancyGrid", "BandedError", "GridConfig",
    "PredictedOccupancyGrid", "QuantizedPog", "RoadLayout", "Scenario", "TrafficParticipant",
    "TrainedPredictor", "banded_pog_error", "compute_ground_truth_pog", "evaluate", "pog_error",
    "predict", "quantize_probability",
]
