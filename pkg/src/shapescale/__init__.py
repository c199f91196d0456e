"""Shape- and scale-aware deformable attention with its loss stack, in numpy."""
from .config import RunConfig, category_presets
from .decoder import DecoderLayer, LayerConfig, decoder_backward, decoder_forward
from .errors import (CapacityError, ConfigurationError, DimensionError, EmptyLatticeError,
                     GradCheckError, InvalidTargetError, LabelParseError, NonFiniteLossError,
                     NumericalGuardError, PresetError)
from .msm import generate_category_label, msm_loss
from .sampling import FeatureMap, QuerySet, ShapeScalePreset
from .train import Model, train_loop

__version__ = "0.1.0"

__all__ = [
    "CapacityError", "ConfigurationError", "DecoderLayer", "DimensionError", "EmptyLatticeError",
    "FeatureMap", "GradCheckError", "InvalidTargetError", "LabelParseError", "LayerConfig", "Model",
    "NonFiniteLossError", "NumericalGuardError", "PresetError", "QuerySet", "RunConfig",
    "ShapeScalePreset", "category_presets", "decoder_backward", "decoder_forward",
    "generate_category_label", "msm_loss", "train_loop",
]
