"""Quantization-aware training with temperature-annealed sigmoid quantizers."""

from .core import (
    PRESETS,
    QuantGrads,
    QuantLevels,
    QuantParams,
    ideal_quantize,
    quantize_codes,
    relaxation_gap,
    soft_quantize,
    soft_quantize_backward,
)
from .estimators import QuantizationNetworkClassifier, SoftQuantizer
from .exceptions import SigquantError
from .inference import InferenceModel, load_packed, pack, packed_gemv, save_packed
from .initializers import InitReport, initialize_quantizer, kmeans_1d
from .nn import SGD, Network, Quantizer
from .training import PhasePlan, TemperatureSchedule, build_quantized_network, finalize, train

__version__ = "0.1.0"

__all__ = [
    "PRESETS", "QuantGrads", "QuantLevels", "QuantParams", "ideal_quantize", "quantize_codes",
    "relaxation_gap", "soft_quantize", "soft_quantize_backward", "QuantizationNetworkClassifier",
    "SoftQuantizer", "SigquantError", "InferenceModel", "load_packed", "pack", "packed_gemv",
    "save_packed", "InitReport", "initialize_quantizer", "kmeans_1d", "SGD", "Network", "Quantizer",
    "PhasePlan", "TemperatureSchedule", "build_quantized_network", "finalize", "train",
]
