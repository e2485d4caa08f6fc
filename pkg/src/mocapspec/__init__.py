"""mocapspec: learn single-range-bin Doppler spectrograms from MoCap markers.

The package splits into a small autodiff tensor core (`tensor`), stream
preprocessing (`dsp`), the spatiotemporal attention model (`model`), the
training engine (`train`), file formats (`data`), a physics point-scatterer
simulator for paired synthetic data (`synth`), and rasterization (`render`).
The `mocapspec` executable chains them into a pipeline.
"""

from .dsp import PreprocessConfig, WindowedPairs, build_pairs
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    FormatError,
    MocapSpecError,
    ParseError,
    ShapeError,
)
from .model import ModelConfig, SttModel, ablation_variant, load_checkpoint, save_checkpoint
from .rng import RngState
from .streams import MoCapStream, RadarSignal, SyncMark
from .synth import ScattererScene, carrier_wavelength, make_dataset, simulate
from .tensor import Tensor
from .train import AdamState, RunLog, TrainConfig, adam_step, mse_loss, one_cycle_lr, train

__version__ = "0.1.0"

__all__ = [
    "AdamState", "ConfigError", "ContractError", "DataError", "FormatError",
    "MoCapStream", "MocapSpecError", "ModelConfig", "ParseError",
    "PreprocessConfig", "RadarSignal", "RngState", "RunLog", "ScattererScene",
    "ShapeError", "SttModel", "SyncMark", "Tensor", "TrainConfig",
    "WindowedPairs", "ablation_variant", "adam_step", "build_pairs",
    "carrier_wavelength", "load_checkpoint", "make_dataset", "mse_loss",
    "one_cycle_lr", "save_checkpoint", "simulate", "train",
]
