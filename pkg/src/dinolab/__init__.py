"""Reconstruction-based unsupervised visual anomaly detection on frozen ViT features."""

from .config import RunConfig, load_config
from .encoder import Encoder, EncoderSpec, FeatureStack, select_layers
from .inference import export_maps, predict
from .metrics import EvalReport, aupro, auroc, average_precision, evaluate, f1_max
from .model import AnomalyModel
from .train import Trainer, load_model, train

__version__ = "0.1.0"

__all__ = [
    "AnomalyModel", "Encoder", "EncoderSpec", "EvalReport", "FeatureStack", "RunConfig", "Trainer",
    "aupro", "auroc", "average_precision", "evaluate", "export_maps", "f1_max", "load_config",
    "load_model", "predict", "select_layers", "train",
]
