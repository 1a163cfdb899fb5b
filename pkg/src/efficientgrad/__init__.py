"""Neural-network training with sign-symmetric feedback and stochastic error pruning."""
from .estimator import EfficientGradClassifier
from .feedback import FeedbackMode, angle_to_bp, init_feedback, modulatory_matrix
from .network import LayerSpec, NetworkConfig, build_network, forward, load_checkpoint, save_checkpoint
from .pruner import PruneConfig, compute_threshold, expected_zero_fraction, stochastic_prune
from .trainer import TrainConfig, compare_modes, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "EfficientGradClassifier",
    "FeedbackMode",
    "LayerSpec",
    "NetworkConfig",
    "PruneConfig",
    "TrainConfig",
    "angle_to_bp",
    "build_network",
    "compare_modes",
    "compute_threshold",
    "evaluate",
    "expected_zero_fraction",
    "forward",
    "init_feedback",
    "load_checkpoint",
    "modulatory_matrix",
    "save_checkpoint",
    "stochastic_prune",
    "train",
]
