"""Few-shot scene-adaptive video anomaly detection.

A frame predictor (U-Net + ConvLSTM, trained adversarially) is meta-trained
with MAML over surveillance scenes so that one gradient step on K frames of
a new scene specialises it; frames it predicts poorly are scored anomalous.
"""

from .backbone import BackboneConfig, forward_prediction, init_params, predict_next_frame, reconstruct_frame
from .config import RunConfig
from .episodes import SceneDataset, Task, Video, load_dataset, sample_task, window_video
from .errors import FewShotVADError, NumericError, StructureError, ValidationError
from .evaluation import evaluate_scene, roc_auc, score_video
from .losses import LossWeights, composite_loss
from .metalearn import MetaConfig, adapt, finetune_baseline, inner_update, meta_objective, meta_train
from .params import ParamSet

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "FewShotVADError", "LossWeights", "MetaConfig", "NumericError", "ParamSet",
    "RunConfig", "SceneDataset", "StructureError", "Task", "ValidationError", "Video", "adapt",
    "composite_loss", "evaluate_scene", "finetune_baseline", "forward_prediction", "init_params",
    "inner_update", "load_dataset", "meta_objective", "meta_train", "predict_next_frame",
    "reconstruct_frame", "roc_auc", "sample_task", "score_video", "window_video",
]
