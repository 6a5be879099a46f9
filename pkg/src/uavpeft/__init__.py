"""UAV audio classification: numpy autodiff, log-mel features, compact CNN and
spectrogram transformer, and parameter-efficient fine-tuning strategies."""

from .tensor import NumericError, Parameter, ShapeError, Tensor, no_grad, precision
from .dsp import FeatureConfig, MelSpectrogram, Waveform, ingest_wav, log_mel
from .augment import AugmentationPlan, AugmentationSpec, apply_plan
from .models import CompactCnn, CompactCnnConfig, SpecTransformer, SpecTransformerConfig, build_model
from .peft import FineTuneStrategy, Strategy, StrategyError, apply_strategy, param_stats
from .train import OptimizerConfig, PlateauScheduler, TrainConfig, fit
from .data import DataError, SynthConfig, kfold_plan, parse_manifest, stratified_split, synth_generate

__version__ = "0.1.0"

__all__ = [
    "Tensor", "Parameter", "NumericError", "ShapeError", "no_grad", "precision",
    "FeatureConfig", "Waveform", "MelSpectrogram", "ingest_wav", "log_mel",
    "AugmentationPlan", "AugmentationSpec", "apply_plan",
    "CompactCnn", "CompactCnnConfig", "SpecTransformer", "SpecTransformerConfig", "build_model",
    "FineTuneStrategy", "Strategy", "StrategyError", "apply_strategy", "param_stats",
    "OptimizerConfig", "PlateauScheduler", "TrainConfig", "fit",
    "DataError", "SynthConfig", "parse_manifest", "stratified_split", "kfold_plan", "synth_generate",
]
