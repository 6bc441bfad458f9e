"""Label-text-enriched extreme multi-label classification with a clustering shortlister."""

__version__ = "0.1.0"

from .corpus import Dataset, SparseVector, dataset_stats, parse_xc_file  # noqa: E402
from .model import Model, load_model, save_model  # noqa: E402
from .trainer import TrainConfig, train_ensemble, train_pipeline  # noqa: E402
from .inference import predict, predict_batch, predict_ensemble  # noqa: E402

__all__ = [
    "Dataset",
    "SparseVector",
    "Model",
    "TrainConfig",
    "dataset_stats",
    "load_model",
    "parse_xc_file",
    "predict",
    "predict_batch",
    "predict_ensemble",
    "save_model",
    "train_ensemble",
    "train_pipeline",
]
