"""retask: re-express a frozen toy language model for non-generative tasks.

The pipeline labels raw data with the model's own generations, then trains
low-rank adapters plus a small task head so the model emits task-native
outputs (retrieval embeddings, box coordinates, class probabilities)
instead of token strings.
"""

from .backbone import Backbone, HiddenStates, ModelConfig, PatchGrid
from .boxes import BoundingBox
from .adapters import LoraConfig, attach, effective_weight, trainable_fraction
from .heads import HeadConfig, TaskModel, bce_loss, contrastive_loss, embed, l1_loss, predict_anomaly, predict_box

__version__ = "0.1.0"

__all__ = [
    "Backbone", "BoundingBox", "HeadConfig", "HiddenStates", "LoraConfig",
    "ModelConfig", "PatchGrid", "TaskModel", "attach", "bce_loss",
    "contrastive_loss", "effective_weight", "embed", "l1_loss",
    "predict_anomaly", "predict_box", "trainable_fraction",
]
