"""Two-stage unsupervised domain adaptation for point cloud quality assessment."""

from upda.backbone import Backbone, build_backbone, extract_raw_features
from upda.checkpoint import Checkpoint
from upda.dataset import DomainConfig, DomainDataset, build_domain, load_dataset, save_dataset
from upda.evaluation import plcc_after_fit, run_protocol, srcc
from upda.train import TrainConfig, predict, run_method

__all__ = [
    "Backbone",
    "Checkpoint",
    "DomainConfig",
    "DomainDataset",
    "TrainConfig",
    "build_backbone",
    "build_domain",
    "extract_raw_features",
    "load_dataset",
    "plcc_after_fit",
    "predict",
    "run_method",
    "run_protocol",
    "save_dataset",
    "srcc",
]
