"""Desk-scale dense detector with set-prediction loss."""

from .boxes import CellGrid, decode, pairwise_iou
from .matching import hungarian_match
from .loss import set_loss
from .model import Detector, DetectionSet, ForwardOutput
from .checkpoint import load_checkpoint, save_checkpoint
from .train import Dataset, TrainConfig, train, evaluate

__all__ = [
    "CellGrid", "Dataset", "DetectionSet", "Detector", "ForwardOutput", "TrainConfig",
    "decode", "evaluate", "hungarian_match", "load_checkpoint", "pairwise_iou",
    "save_checkpoint", "set_loss", "train",
]
