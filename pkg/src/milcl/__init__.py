"""Continual class-incremental learning for gated-attention multiple instance learning."""

from .data import SynthConfig, gen_synthetic, load_dataset, read_bag, synth_stream, write_bag
from .estimators import ContinualMILClassifier, MILClassifier
from .memory import MemoryEntry, PseudoBagPool, Reservoir, SelectionStrategy, distill, select_indices
from .metrics import AccuracyMatrix, aacc, bwt, im, im_per_task
from .model import Bag, MilModel, forward_attention, forward_classifier, value_and_grad
from .trainer import ContinualLearner, TaskDataset, TaskStream, TrainConfig, evaluate, run_cl, run_joint

__version__ = "0.1.0"

__all__ = [
    "AccuracyMatrix", "Bag", "ContinualLearner", "ContinualMILClassifier", "MILClassifier", "MemoryEntry",
    "MilModel", "PseudoBagPool", "Reservoir", "SelectionStrategy", "SynthConfig", "TaskDataset", "TaskStream",
    "TrainConfig", "aacc", "bwt", "distill", "evaluate", "forward_attention", "forward_classifier",
    "gen_synthetic", "im", "im_per_task", "load_dataset", "read_bag", "run_cl", "run_joint", "select_indices",
    "synth_stream", "value_and_grad", "write_bag",
]
