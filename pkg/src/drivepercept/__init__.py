"""Multi-task driving perception: vehicle detection, drivable-area and lane segmentation."""

from .anchors import AnchorSet, kmeans_anchors
from .config import ExperimentConfig, load_config
from .metrics import MetricsReport
from .model import MultiTaskNet, build_model, load_checkpoint, save_checkpoint
from .trainer import evaluate, train

__version__ = "0.1.0"
