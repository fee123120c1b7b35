"""Semi-dense 3D FCNN ensemble segmentation with correction suggestions."""

from .data import Subject
from .ensemble import EnsembleConfig, majority_vote, suggest_corrections, train_ensemble
from .metrics import evaluate
from .network import NetworkConfig, build_network, forward_segment, load_checkpoint, save_checkpoint
from .phantom import PhantomConfig, generate_phantom
from .training import TrainConfig, dense_inference, train
from .volume import Volume, read_volume, write_volume

__version__ = "0.1.0"

__all__ = [
    "Subject", "EnsembleConfig", "majority_vote", "suggest_corrections", "train_ensemble",
    "evaluate", "NetworkConfig", "build_network", "forward_segment", "load_checkpoint",
    "save_checkpoint", "PhantomConfig", "generate_phantom", "TrainConfig",
    "dense_inference", "train", "Volume", "read_volume", "write_volume", "__version__",
]
